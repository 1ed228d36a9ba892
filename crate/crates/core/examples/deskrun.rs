// One full desk pipeline + evaluation; prints the metric table.
use mas_core::harness::{eval_suite, pipeline_train, EvalOptions, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::desk();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("seed", v)) => cfg.seed = v.parse().unwrap(),
            Some(("sbt.steps", v)) => cfg.sbt_train.steps = v.parse().unwrap(),
            Some(("sbt.cf_steps", v)) => cfg.sbt_train.cf_steps = v.parse().unwrap(),
            _ => panic!("unknown arg {arg}"),
        }
    }
    let t0 = std::time::Instant::now();
    let art = pipeline_train(&cfg, Some(std::path::Path::new("/tmp/deskrun"))).unwrap();
    println!("pipeline: {:.1}s", t0.elapsed().as_secs_f64());
    for s in &art.manifest.stages {
        println!("{}: {:?}", s.name, s.metrics);
    }
    let t1 = std::time::Instant::now();
    let report = eval_suite(&art, &EvalOptions::from_config(&cfg)).unwrap();
    println!("eval: {:.1}s", t1.elapsed().as_secs_f64());
    println!("{}", report.render_table());
}
