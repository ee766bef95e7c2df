// Evaluation sweeps over prompt noise and prompt patterns, written as
// deterministic JSON reports.

use crayon_bench::harness::{self, CollectionConfig, PredictorRef, Split, NOISE_FRACTIONS};
use crayon_bench::predictor::GeometricPredictor;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train: 0,
        test_seen: 40,
        test_unseen: 0,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 41)?;
    let test = ds.split(Split::TestSeen);
    let solver = GeometricPredictor::default();
    let fp = &ds.config_fingerprint;

    println!("noise  success  median prompt error");
    for run in harness::run_noise_sweep(&test, PredictorRef::Model(&solver), &NOISE_FRACTIONS, 41, fp) {
        let r = run.report();
        let err = r.angular_error_deg.get("prompt").map(|a| a.median).unwrap_or(0.0);
        println!("{:>5}  {:.3}    {err:.2} deg", r.meta.prompt_source, r.success_rate);
    }

    println!("pattern  success  failures");
    let runs = harness::run_prompt_ablation(&test, PredictorRef::Model(&solver), 41, fp);
    for run in &runs {
        let r = run.report();
        println!("{:<7}  {:.3}    {:?}", format!("{:?}", r.meta.pattern), r.success_rate, r.failures);
    }

    // Reports are a pure function of the stored trials.
    let again = harness::run_prompt_ablation(&test, PredictorRef::Model(&solver), 41, fp);
    assert_eq!(runs.last().unwrap().report().to_json(), again.last().unwrap().report().to_json());
    println!("{}", runs.last().unwrap().report().to_json());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
