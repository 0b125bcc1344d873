//! Replays the checked-in fuzz corpus through the decoder entry points, and
//! every prefix of each seed, which must be rejected or decoded without
//! panicking.

use std::fs;
use std::path::{Path, PathBuf};

use unrest::config::KvConfig;
use unrest::env::{parse_scenario, STATE_DIM};
use unrest::grad::Checkpoint;
use unrest::manifest::RunManifest;
use unrest::pipeline::{parse_seeds, render_seeds};
use unrest::planner::{KdUncertaintyIndex, TargetReturnPredictor};
use unrest::policy::PolicyNet;
use unrest::return_model::ReturnNet;
use unrest::trajlog::{decode_binary, decode_ndjson, decode_segmented, encode_binary, encode_ndjson};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Runs `f` on every seed and on a spread of its prefixes.
fn replay(target: &str, mut f: impl FnMut(&[u8]) -> bool) -> usize {
    let mut accepted = 0;
    for (_, data) in seeds(target) {
        accepted += usize::from(f(&data));
        let step = (data.len() / 200).max(1);
        for n in (0..data.len()).step_by(step) {
            f(&data[..n]);
        }
    }
    accepted
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

#[test]
fn kv_config() {
    let ok = replay("kv_config", |d| {
        let Some(t) = text(d) else { return false };
        let Ok(kv) = KvConfig::parse(t) else { return false };
        let again = KvConfig::parse(&kv.render()).unwrap();
        assert_eq!(again.render(), kv.render());
        true
    });
    assert_eq!(ok, seeds("kv_config").len());
}

#[test]
fn scenario() {
    let ok = replay("scenario", |d| text(d).is_some_and(|t| parse_scenario(t).is_ok()));
    assert_eq!(ok, seeds("scenario").len());
}

#[test]
fn seed_lists() {
    let ok = replay("seeds", |d| {
        let Some(Ok(s)) = text(d).map(|t| parse_seeds("seeds", t)) else { return false };
        assert_eq!(parse_seeds("seeds", &render_seeds(&s)).unwrap(), s);
        true
    });
    assert_eq!(ok, seeds("seeds").len());
}

#[test]
fn ndjson() {
    let ok = replay("ndjson", |d| {
        let Some(Ok(trajs)) = text(d).map(decode_ndjson) else { return false };
        assert_eq!(decode_ndjson(&encode_ndjson(&trajs)).unwrap(), trajs);
        true
    });
    // The truncated seed is there to be rejected.
    assert_eq!(ok, 1);
}

#[test]
fn segmented() {
    let ok = replay("segmented", |d| text(d).is_some_and(|t| decode_segmented(t).is_ok()));
    assert_eq!(ok, seeds("segmented").len());
}

#[test]
fn binary() {
    let ok = replay("binary", |d| {
        let Ok(trajs) = decode_binary(d) else { return false };
        assert_eq!(decode_binary(&encode_binary(&trajs)).unwrap(), trajs);
        true
    });
    assert_eq!(ok, 1);
}

#[test]
fn checkpoints() {
    let (mut policies, mut returns) = (0, 0);
    replay("checkpoint", |d| {
        let Some(Ok(ckpt)) = text(d).map(Checkpoint::from_json) else { return false };
        let _ = ckpt.to_store();
        policies += usize::from(PolicyNet::from_checkpoint(&ckpt).is_ok());
        returns += usize::from(ReturnNet::from_checkpoint(&ckpt).is_ok());
        true
    });
    assert_eq!((policies, returns), (1, 1));
}

#[test]
fn inflated_architecture_is_rejected_before_allocation() {
    let (_, data) = seeds("checkpoint").into_iter().find(|(p, _)| p.ends_with("policy.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&data).unwrap();
    v["architecture"]["trunk"]["dim"] = (1u64 << 40).into();
    let ckpt = Checkpoint::from_json(&v.to_string()).unwrap();
    assert!(PolicyNet::from_checkpoint(&ckpt).is_err());
    v["architecture"]["trunk"]["dim"] = 2.into();
    v["architecture"]["max_timestep"] = (1u64 << 50).into();
    let ckpt = Checkpoint::from_json(&v.to_string()).unwrap();
    assert!(PolicyNet::from_checkpoint(&ckpt).is_err());
}

#[test]
fn kdtree_index() {
    let ok = replay("kdtree_index", |d| {
        let Some(Ok(ix)) = text(d).map(KdUncertaintyIndex::from_json) else { return false };
        assert!(ix.query(&[0.0; STATE_DIM]).is_finite());
        true
    });
    assert_eq!(ok, seeds("kdtree_index").len());
}

#[test]
fn predictor() {
    let ok = replay("predictor", |d| text(d).is_some_and(|t| TargetReturnPredictor::from_json(t).is_ok()));
    assert_eq!(ok, seeds("predictor").len());
}

#[test]
fn manifests() {
    let ok = replay("manifest", |d| text(d).is_some_and(|t| RunManifest::from_json(t).is_ok()));
    assert_eq!(ok, seeds("manifest").len());
}
