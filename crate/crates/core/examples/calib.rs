//! scratch diagnostics (not shipped)
use ossa_core::backbone::{build_backbone, InsertionPoint};
use ossa_core::train::{demo_config, materialize_data, resolve_prototype, train};
use ossa_core::image::Image;
use ossa_core::stats::channel_stats;
use ossa_core::SeededRng;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or("stats".into());
    if mode == "stats" {
        let cfg = demo_config(1);
        let data = materialize_data(&cfg).unwrap();
        let bb = build_backbone(&cfg.arch, 1).unwrap();
        let root = SeededRng::from_seed(1);
        let proto = resolve_prototype(&cfg, &data, &bb, &root).unwrap();
        let batch = Image::batch(&data.source_train.images[..16]).unwrap();
        for point in [InsertionPoint::PostStem, InsertionPoint::PostStage1] {
            let act = bb.forward_to(&batch, point).unwrap();
            let s = channel_stats(&act, 1e-5).unwrap();
            let t = proto.layer(point.name()).unwrap();
            println!("== {}", point.name());
            for c in 0..t.channels().min(16) {
                // average source stats over batch
                let mu_s: f64 = (0..16).map(|b| s.mu(b, c)).sum::<f64>() / 16.0;
                let sd_s: f64 = (0..16).map(|b| s.sigma(b, c)).sum::<f64>() / 16.0;
                println!("  ch{c:2}: src mu {mu_s:7.3} sd {sd_s:6.3} | proto mu {:7.3} sd {:6.3}", t.mu(0, c), t.sigma(0, c));
            }
        }
    } else {
        // loss curves for ossa std0
        let mut cfg = demo_config(1);
        cfg.steps = 900;
        cfg.ossa.noise_std = 0.0;
        let (_, r) = train(&cfg).unwrap();
        let l: Vec<String> = r.epoch_losses.iter().map(|v| format!("{v:.2}")).collect();
        println!("std0 src {:.3} tgt {:.3} losses[{}]", r.source_accuracy, r.target_accuracy, l.join(","));
    }
}
