use eclvad_core::fmap::{fmap_from_bytes, Label};
use eclvad_core::harness::{run_scenario, EvalReport, Method, Strategy, StrategyConfig};
use eclvad_core::ledger::OpLedger;
use eclvad_core::padim::{fit, CovMode, GaussianField};
use eclvad_core::padim_cl::FieldList;
use eclvad_core::patchcore::{build_patch_grid, pool_patches, MemoryBank, PatchGrid};
use eclvad_core::patchcore_cl::{BankList, ClVariant};
use eclvad_core::coreset::Points;
use eclvad_core::scenario::{layer_file, Scenario};
use eclvad_core::synth::{generate_synthetic, SynthSpec};

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_tasks: 3,
        d_per_layer: vec![3, 5],
        grid: [6, 6],
        normals_per_task: 8,
        anomalies_per_task: 2,
        test_normals_per_task: Some(2),
        cluster_separation: 10.0,
        anomaly_offset: 6.0,
        seed,
        image_scale: 4,
    }
}

#[test]
fn synthetic_tree_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (written, manifest) = generate_synthetic(&spec(1), dir.path()).unwrap();
    let loaded = Scenario::load(&manifest).unwrap();
    assert_eq!(loaded.manifest_hash, written.manifest_hash);
    assert_eq!(loaded.tasks.len(), 3);
    for (a, b) in loaded.tasks.iter().zip(&written.tasks) {
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    // layer files are plain FMAP and anomalies carry their masks
    let task = &loaded.manifest().tasks[0];
    let stack_dir = manifest.parent().unwrap().join(&task.test[0]);
    let bytes = std::fs::read(layer_file(&stack_dir, 0)).unwrap();
    let map = fmap_from_bytes(&bytes).unwrap();
    assert_eq!((map.height, map.width, map.channels), (6, 6, 3));
    let anomalies = loaded.tasks[0].test.iter().filter(|s| s.label() == Label::Anomalous);
    assert!(anomalies.into_iter().all(|s| s.mask().is_some_and(|m| m.count_ones() > 0)));
}

#[test]
fn report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let (scenario, _) = generate_synthetic(&spec(2), dir.path()).unwrap();
    let cfg = StrategyConfig { bank_budget: Some(100), ..StrategyConfig::new(Method::PatchcoreClpp) };
    let report = run_scenario(&scenario, &cfg).unwrap();
    let json = report.to_json().unwrap();
    let back = EvalReport::from_json(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json().unwrap(), json);

    let csv = String::from_utf8(report.to_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 4);
    assert!(csv.starts_with("schema_version,checkpoint,task,task_name,metric,value"));
    let ledger: serde_json::Value = serde_json::from_slice(&report.ledger_json().unwrap()).unwrap();
    assert_eq!(ledger["checkpoints"].as_array().unwrap().len(), 3);
}

#[test]
fn finetune_forgets_what_native_multimodal_keeps() {
    let scenario = eclvad_core::synth::synthesize(&spec(3)).unwrap();
    let native = run_scenario(&scenario, &StrategyConfig::new(Method::PadimLiteMulti)).unwrap();
    let ft = run_scenario(
        &scenario,
        &StrategyConfig { strategy: Strategy::Finetune, ..StrategyConfig::new(Method::PadimLiteMulti) },
    )
    .unwrap();
    // task 1 after the last step: the fine-tuned model only knows task 3
    let keep = native.cell(3, 1).unwrap().metrics.image_auroc;
    let lost = ft.cell(3, 1).unwrap().metrics.image_auroc;
    assert!(keep > lost, "{keep} vs {lost}");
}

fn grids(scenario: &Scenario, task: usize, p: usize) -> Vec<PatchGrid> {
    scenario.tasks[task].train.iter().map(|s| build_patch_grid(s, p).unwrap()).collect()
}

#[test]
fn bank_list_and_field_list_persist() {
    let scenario = eclvad_core::synth::synthesize(&spec(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ledger = OpLedger::new();
    let mut banks = BankList::new(90, ClVariant::Cl);
    let mut fields = FieldList::new();
    for (t, task) in scenario.tasks.iter().enumerate() {
        let g = grids(&scenario, t, 3);
        let (pool, d) = pool_patches(&g).unwrap();
        banks.update(&task.name, Points::new(&pool, d).unwrap(), &ledger).unwrap();
        fields.push(&task.name, fit(&grids(&scenario, t, 1), CovMode::Full).unwrap()).unwrap();
    }
    banks.save(&dir.path().join("banks")).unwrap();
    fields.save(&dir.path().join("fields")).unwrap();

    let banks_back = BankList::load(&dir.path().join("banks")).unwrap();
    assert_eq!(banks_back.banks, banks.banks);
    assert_eq!(banks_back.variant, ClVariant::Cl);
    let fields_back = FieldList::load(&dir.path().join("fields")).unwrap();
    assert_eq!(fields_back.names, fields.names);

    let bank_file = std::fs::read(dir.path().join("banks/bank_01.bank")).unwrap();
    assert_eq!(MemoryBank::from_bytes(&bank_file).unwrap().len(), 30);
    let gaus = std::fs::read(dir.path().join("fields/field_00.gaus")).unwrap();
    let field = GaussianField::from_bytes(&gaus).unwrap();
    assert_eq!((field.h, field.w, field.d, field.n_samples), (6, 6, 8, 8));
}
