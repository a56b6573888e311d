use std::path::PathBuf;

use interference_core::allocation::{fci_preprocess, PreprocessOptions};
use interference_core::discovery::{discover_table_parents, DiscoveryOptions};
use interference_core::estimators::{estimate_table, BootstrapOptions, EstimateOptions, NuisanceSpec};
use interference_core::models::{ForestOptions, ModelSpec, PropensityOptions};
use interference_core::sem::{oracle_table, simulate};
use interference_core::SemConfig;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

#[test]
fn golden_config_matches_fixture() {
    let text = std::fs::read_to_string(fixture("golden.json")).unwrap();
    let cfg: SemConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, SemConfig::reference());
}

#[test]
fn golden_outputs_reproduce_byte_for_byte() {
    let cfg = SemConfig::reference();
    let mut buf = Vec::new();
    simulate(&cfg, 200).unwrap().write_csv(&mut buf).unwrap();
    assert!(buf == std::fs::read(fixture("golden_dataset.csv")).unwrap());
    let mut buf = Vec::new();
    oracle_table(&cfg, 1_000_000).unwrap().write_csv(&mut buf).unwrap();
    assert!(buf == std::fs::read(fixture("golden_oracle.csv")).unwrap());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = SemConfig::reference();
    let run = || {
        let d = simulate(&cfg, 6_000).unwrap();
        let oracle = oracle_table(&cfg, 50_000).unwrap();
        let table = fci_preprocess(&d, 1, PreprocessOptions::default()).unwrap();
        let parents = discover_table_parents(&table, &DiscoveryOptions::default()).unwrap();
        let forest = ModelSpec::Forest(ForestOptions { n_trees: 20, ..Default::default() });
        let spec = NuisanceSpec {
            outcome_model: forest,
            propensity: PropensityOptions { model: forest, ..Default::default() },
            ..Default::default()
        };
        let small = d.filter(|pv| pv.id < 1_500);
        let opts =
            EstimateOptions { bootstrap: Some(BootstrapOptions { b: 50, ..Default::default() }), ..Default::default() };
        let means = estimate_table(&small, &spec, &opts).unwrap();
        (d.digest(), oracle, parents, serde_json::to_string(&means).unwrap())
    };
    let one = with_threads(1, run);
    let three = with_threads(3, run);
    assert_eq!(one.0, three.0);
    assert_eq!(one.1, three.1);
    assert_eq!(one.2, three.2);
    assert!(one.3 == three.3);
}
