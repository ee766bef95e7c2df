// Trains the small learned predictor with all three losses and evaluates it
// against the geometric solver on held-out scenes.

use crayon_bench::harness::{self, CollectionConfig, EvalSpec, PredictorRef, PromptSource, Split, TrainConfig};
use crayon_bench::objective::LossWeights;
use crayon_bench::predictor::{self, GeometricPredictor, ToyModel};
use crayon_bench::Pattern;

pub fn run_with(train: usize, epochs: usize) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train,
        test_seen: 40,
        test_unseen: 0,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 21)?;
    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let samples = harness::toy_samples(&ds.split(Split::Train), &tc.toy);
    let weights = LossWeights::new(1.0, 1.0, 1.0)?;
    let model = predictor::train_toy_model(&samples, &tc.toy, &weights, &tc.curriculum, tc.epochs, 21)?;
    for s in model.curve.iter().step_by((epochs / 5).max(1)) {
        println!(
            "epoch {:>3}: total {:.4}  L_T {:.4}  L_O {:.2e}  L_P {:.2e}",
            s.epoch, s.total, s.l_text, s.l_ortho, s.l_proj
        );
    }

    // Saved models carry a hash of their config and refuse a mismatched one.
    let reloaded = ToyModel::from_json(&model.to_json(), &tc.toy)?;
    let mut other = tc.toy;
    other.hidden += 1;
    assert!(ToyModel::from_json(&model.to_json(), &other).is_err());

    let test = ds.split(Split::TestSeen);
    let spec = EvalSpec {
        name: "toy".into(),
        pattern: Pattern::PZYM,
        source: PromptSource::Gt,
        selector: Default::default(),
        seed: 21,
    };
    let solver = GeometricPredictor::default();
    for (name, p) in [("toy", PredictorRef::Model(&reloaded)), ("solver", PredictorRef::Model(&solver))] {
        let r = harness::run_eval(&test, p, &spec, &ds.config_fingerprint).report();
        let z = r.angular_error_deg.get("z").map(|a| a.median).unwrap_or(f64::NAN);
        println!("{name:>6}: success {:.3}, median z error {z:.2} deg", r.success_rate);
    }
    Ok(())
}

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    run_with(120, 10)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_with(600, 40)
}
