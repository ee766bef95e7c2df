// Collects a small desk dataset, writes frames with hashes, and reloads it.
//
// `cargo run --example collect_dataset -- [out_dir]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use crayon_bench::harness::{self, CollectionConfig, Split};

pub fn run_in(dir: &std::path::Path) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train: 40,
        test_seen: 20,
        test_unseen: 10,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 17)?;
    println!(
        "{} records, {} skipped, {} scenes redrawn, config {}",
        ds.records.len(),
        ds.skipped_records,
        ds.rejected_scenes,
        ds.config_fingerprint
    );
    for split in [Split::Train, Split::TestSeen, Split::TestUnseen] {
        let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
        for r in ds.split(split) {
            *kinds.entry(r.kind().as_str()).or_default() += 1;
        }
        println!("  {:<11} {kinds:?}", split.to_string());
    }

    let first = &ds.records[0];
    println!("record 0: {} {:?}", first.kind(), first.prompt.pattern);
    println!("  contact {:?}, remedies {}", first.prompt.contact_px, first.remedies.len());

    let written = harness::write_dataset(&ds, dir)?;
    let loaded = harness::load_dataset(dir)?;
    assert_eq!(loaded, written);
    println!("wrote and verified {} frames under {}", loaded.records.len(), dir.display());
    Ok(())
}

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    run_in(dir.path())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    match std::env::args().nth(1) {
        Some(out) => run_in(&PathBuf::from(out)),
        None => run(),
    }
}
