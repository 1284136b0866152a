use std::time::Instant;

use vit_adapter_core::config::ModelConfig;
use vit_adapter_core::toy::{train, ModelKind, SampleStream, TrainConfig};

fn main() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1000);
    for seed in 0..3u64 {
        for kind in ModelKind::ALL {
            let tc = TrainConfig {
                steps,
                seed,
                ..Default::default()
            };
            let t0 = Instant::now();
            let src = SampleStream {
                seed,
                batch: tc.batch,
                next_index: 0,
            };
            let (log, _, _) = train::<f32, _>(&cfg, kind, &tc, src, |_| {}).unwrap();
            println!(
                "seed {seed} {}: {:.0} s, loss {:.3}, miou {:.4}",
                kind.name(),
                t0.elapsed().as_secs_f64(),
                log.rows.last().unwrap().loss,
                log.final_miou
            );
        }
    }
}
