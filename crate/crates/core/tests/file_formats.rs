use std::path::{Path, PathBuf};

use morphloss::harness::{self, ExperimentConfig};
use morphloss::hparam_search::{parse_trial_log, TrialStatus};
use morphloss::losses::LossKind;
use morphloss::morphable::MorphableModel;
use morphloss::synthdata::Dataset;
use morphloss::training::checkpoint;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn corpus(target: &str, name: &str) -> Vec<u8> {
    let path = repo_root().join("fuzz/corpus").join(target).join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn corpus_text(target: &str, name: &str) -> String {
    String::from_utf8(corpus(target, name)).unwrap()
}

#[test]
fn model_seed_round_trips() {
    let model = MorphableModel::from_json(&corpus_text("model_json", "tiny.json")).unwrap();
    let again = MorphableModel::from_json(&model.to_json()).unwrap();
    assert_eq!(again, model);
    assert_eq!(again.content_hash(), model.content_hash());
    assert!(MorphableModel::from_json(&corpus_text("model_json", "empty.json")).is_err());
}

#[test]
fn scenes_seed_round_trips_byte_for_byte() {
    let text = corpus_text("scenes_jsonl", "tiny.jsonl");
    let ds = Dataset::from_jsonl(&text).unwrap();
    assert!(!ds.scenes.is_empty());
    assert_eq!(ds.to_jsonl(), text);
    assert!(Dataset::from_jsonl(&corpus_text("scenes_jsonl", "empty.jsonl")).is_err());
}

#[test]
fn scenes_seed_matches_model_seed() {
    let model = MorphableModel::from_json(&corpus_text("model_json", "tiny.json")).unwrap();
    let ds = Dataset::from_jsonl(&corpus_text("scenes_jsonl", "tiny.jsonl")).unwrap();
    ds.check_model(&model).unwrap();
}

#[test]
fn checkpoint_seed_restores_and_reencodes() {
    let bytes = corpus("checkpoint", "tiny.ckpt");
    let (header, params) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(header.n_params, params.len());
    let model = MorphableModel::from_json(&corpus_text("model_json", "tiny.json")).unwrap();
    let reg = checkpoint::restore(&model, &header, params).unwrap();
    let ds = Dataset::from_jsonl(&corpus_text("scenes_jsonl", "tiny.jsonl")).unwrap();
    let pred = reg.predict(&ds.scenes[0].views[0].observation).unwrap();
    assert!(pred.t.iter().all(|v| v.is_finite()));

    let (again, again_params) = checkpoint::decode(&checkpoint::encode(&reg, header.config.as_ref(), None)).unwrap();
    assert_eq!(again.blocks, header.blocks);
    assert_eq!(again_params, reg.params());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    assert!(checkpoint::decode(&corpus("checkpoint", "header_only.ckpt")).is_err());
    let bytes = corpus("checkpoint", "tiny.ckpt");
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn trial_log_seeds_parse() {
    let (header, records) = parse_trial_log(&corpus_text("trial_log", "xqt.jsonl")).unwrap();
    assert!(header.selection.contains("shape3d"));
    assert!(!records.is_empty());
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.trial, i);
        if r.status == TrialStatus::Ok {
            assert!(r.metrics.is_some());
        }
    }
    let (_, none) = parse_trial_log(&corpus_text("trial_log", "header_only.jsonl")).unwrap();
    assert!(none.is_empty());
}

#[test]
fn config_seeds_resolve_for_every_loss() {
    for name in ["empty.toml", "small_net.toml", "tiny.toml"] {
        let cfg = ExperimentConfig::from_toml(&corpus_text("config_toml", name)).unwrap();
        for loss in &cfg.losses {
            cfg.train_config(*loss).unwrap();
        }
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.hash(), cfg.hash(), "{name}");
    }
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(repo_root().join("README.md")).unwrap();
    let start = readme.find("```toml\n").expect("toml block") + "```toml\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let cfg = ExperimentConfig::from_toml(&readme[start..end]).unwrap();
    assert_eq!(cfg.losses, LossKind::ALL.to_vec());
    for loss in LossKind::ALL {
        let tc = cfg.train_config(loss).unwrap();
        assert_eq!(tc.arch.encoder, vec![64, 64]);
    }
    assert_eq!(cfg.train_config(LossKind::Mrl).unwrap().views, 4);
}

#[test]
fn harness_outputs_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(&corpus_text("config_toml", "tiny.toml")).unwrap();
    let gen = dir.path().join("gen");
    let ds = harness::cmd_gen_data(&cfg, &gen).unwrap();

    let model_text = std::fs::read_to_string(gen.join(harness::MODEL_FILE)).unwrap();
    let model = MorphableModel::from_json(&model_text).unwrap();
    let data_text = std::fs::read_to_string(gen.join(harness::DATASET_FILE)).unwrap();
    assert_eq!(Dataset::from_jsonl(&data_text).unwrap().scenes, ds.scenes);

    cfg.model.path = Some(gen.join(harness::MODEL_FILE));
    cfg.dataset_path = Some(gen.join(harness::DATASET_FILE));
    let train_dir = dir.path().join("train");
    let run = harness::cmd_train(&cfg, LossKind::Gal, &train_dir).unwrap();
    let (restored, header) = checkpoint::load(&train_dir.join("gal.ckpt"), &model).unwrap();
    assert_eq!(restored.params(), run.regressor.params());
    assert_eq!(header.config.as_ref(), Some(&run.config));
    let obs = &ds.scenes[0].views[0].observation;
    assert_eq!(restored.predict(obs).unwrap(), run.regressor.predict(obs).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_dir.join(harness::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], serde_json::Value::from(cfg.hash()));
}
