//! The shipped demo configuration end to end: data, three models, four
//! samplers and the metrics table, written under a temporary directory
//! unless a path is given.

use edm_downscale::config::RunConfig;
use edm_downscale::pipeline::{Method, ModelKind, Run};

fn main() -> edm_downscale::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => std::env::temp_dir().join("edm-downscale-demo"),
    };
    let run = Run::with_dir(RunConfig::demo(), &dir)?;
    let data = run.gen_data()?;
    for kind in ModelKind::ALL {
        let losses = run.train(kind, &data)?;
        println!("{kind:<16} loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    }
    for m in Method::ALL {
        let p = run.sample(m, &data)?;
        println!("{m:<16} members {} clamped {}", p.members.len(), p.clamped);
    }
    let report = run.evaluate(None, &data)?;
    for r in report.rows.iter().filter(|r| r.metric == "rmse_climatology") {
        println!("{:<16} {:<14} {:.4} rank {:?}", r.model, r.channel, r.value, r.rank);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
