use std::path::Path;

use unrest::pipeline::{PipelineConfigs, RunConfig};
use unrest::planner::PlannerConfig;
use unrest::policy::PolicyTrainConfig;
use unrest::return_model::ReturnTrainConfig;

struct Parsed {
    run: RunConfig,
    ret: ReturnTrainConfig,
    policy: PolicyTrainConfig,
    planner: PlannerConfig,
}

fn parse(name: &str) -> Parsed {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let c = PipelineConfigs::load_dir(&dir).unwrap();
    let (mut run, mut ret, mut pol, mut pl) = (c.run, c.return_model, c.policy, c.planner);
    let parsed = Parsed {
        run: RunConfig::from_kv(&mut run).unwrap(),
        ret: ReturnTrainConfig::from_kv(&mut ret).unwrap(),
        policy: PolicyTrainConfig::from_kv(&mut pol).unwrap(),
        planner: PlannerConfig::from_kv(&mut pl).unwrap(),
    };
    for kv in [run, ret, pol, pl] {
        kv.finish().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    unrest::env::parse_scenario(&c.scenario.render()).unwrap();
    parsed
}

#[test]
fn desk_configs_are_the_defaults() {
    let p = parse("desk");
    assert_eq!(p.run, RunConfig::default());
    assert_eq!(p.ret, ReturnTrainConfig::default());
    assert_eq!(p.policy, PolicyTrainConfig::default());
    assert_eq!(p.planner, PlannerConfig::default());
}

#[test]
fn full_configs_are_the_full_scale_presets() {
    let p = parse("full");
    assert_eq!(p.ret, ReturnTrainConfig::full_scale());
    assert_eq!(p.policy, PolicyTrainConfig::full_scale());
    assert_eq!(p.planner, PlannerConfig::full_scale());
}

#[test]
fn smoke_configs_collect_fifty_thousand_steps() {
    let p = parse("smoke");
    assert_eq!(p.run.dataset_steps, 50_000);
}
