use std::collections::BTreeSet;

use ufa::decode_eval::{read_reports, write_reports};
use ufa::harness::{
    generate_artifacts, render_report, run_experiment, train_tokenizer_artifact, ExperimentConfig, ExperimentKind, Workspace,
};
use ufa::promptkit::{GENERATION_TASK, INTENT_TASK, SIMILARITY_TASK};
use ufa::Error;

const TINY: &str = "
n_dialogues = 160
gold_dialogues = 200
n_domains = 4
n_intents = 4
dev_size = 20
pair_train = 40
pair_dev = 10
pair_test = 10
vocab_size = 400
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_source_len = 96
max_target_len = 24
denoise_steps = 3
ufa_steps = 3
finetune_max_steps = 2
dev_evals = 1
dev_limit = 6
test_limit = 6
beam_width = 2
seeds = 1, 2, 3
fewshot_k = 1, 2, 3
tasks = intent detection, dialogue generation
fewshot_task = intent detection
";

fn prepared() -> (tempfile::TempDir, ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::parse(TINY).unwrap();
    c.out_dir = dir.path().to_path_buf();
    generate_artifacts(&c).unwrap();
    train_tokenizer_artifact(&c).unwrap();
    (dir, c)
}

fn groups(c: &ExperimentConfig, kind: ExperimentKind) -> Vec<String> {
    let mut c = c.clone();
    c.experiment = kind;
    run_experiment(&c).unwrap().groups()
}

#[test]
fn every_experiment_emits_its_groups() {
    let (_dir, c) = prepared();
    let ws = Workspace::load(c.clone()).unwrap();

    let main = ws.run(ExperimentKind::Main).unwrap();
    assert_eq!(main.groups(), ["full"]);
    assert_eq!(main.finetune_runs, 2 * 2 * 3);
    assert_eq!(main.stage2.len(), 1);
    for r in &main.reports {
        assert_eq!(r.split, "test");
        assert!(r.checkpoint.contains(&format!("seed{}", r.seed)), "{}", r.checkpoint);
        assert!(["ufa", "ufa_ori"].contains(&r.model_variant.as_str()));
    }
    let generation: Vec<_> = main.reports.iter().filter(|r| r.task_name == GENERATION_TASK).collect();
    assert!(generation.iter().all(|r| r.bleu2.is_some() && r.rouge1.is_some() && r.accuracy.is_none()));

    let few = ws.run(ExperimentKind::Fewshot).unwrap();
    assert_eq!(few.groups(), ["k=1", "k=2", "k=3"]);
    assert_eq!(few.finetune_runs, 3 * 3 * 2);
    assert!(few.reports.iter().all(|r| r.task_name == INTENT_TASK));

    let unseen = ws.run(ExperimentKind::Unseen).unwrap();
    assert_eq!(unseen.groups(), ["unseen"]);
    assert_eq!(unseen.isolation_overlap, 0);
    assert!(unseen.stage2.iter().all(|s| !s.tasks.iter().any(|t| t == SIMILARITY_TASK)));
    assert!(unseen.reports.iter().all(|r| r.macro_f1.is_some() && r.accuracy.is_some()));

    let prompt = ws.run(ExperimentKind::PromptAblation).unwrap();
    assert_eq!(prompt.groups(), ["full", "no_goal", "no_task"]);
    assert!(prompt.containment_checked > 0);
    assert_eq!(prompt.containment_violations, 0);

    let task = ws.run(ExperimentKind::TaskAblation).unwrap();
    let got: BTreeSet<String> = task.groups().into_iter().collect();
    let want: BTreeSet<String> = ["ufa_ori", "+domain", "+intent", "+summary", "+dialogue", "ufa"].map(String::from).into();
    assert_eq!(got, want);
    assert_eq!(task.stage2.iter().filter(|s| s.tasks.len() == 1).count(), 4);
    assert_eq!(task.finetune_runs, 6 * 2 * 3);

    let text = render_report(&task.reports);
    assert!(text.contains("== task_ablation =="));
    assert!(text.contains("+dialogue"));
}

#[test]
fn pretrained_checkpoints_are_reused_from_disk() {
    let (_dir, mut c) = prepared();
    c.seeds = vec![4];
    c.tasks = vec![INTENT_TASK.to_string()];
    let first = Workspace::load(c.clone()).unwrap();
    let a = first.denoise_model().unwrap();
    let files: Vec<_> = std::fs::read_dir(c.checkpoint_dir()).unwrap().collect();
    assert_eq!(files.len(), 1);
    let second = Workspace::load(c.clone()).unwrap();
    let b = second.denoise_model().unwrap();
    assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());

    c.denoise_steps += 1;
    let third = Workspace::load(c.clone()).unwrap();
    assert_ne!(third.checkpoint_id("denoise"), first.checkpoint_id("denoise"));
    third.denoise_model().unwrap();
    assert_eq!(std::fs::read_dir(c.checkpoint_dir()).unwrap().count(), 2);
}

#[test]
fn identical_configs_give_identical_reports() {
    let (_dir, mut c) = prepared();
    c.seeds = vec![9];
    c.tasks = vec![INTENT_TASK.to_string()];
    let a = run_experiment(&c).unwrap();
    let b = run_experiment(&c).unwrap();
    assert_eq!(a.reports, b.reports);
}

#[test]
fn reports_round_trip_through_jsonl() {
    let (dir, mut c) = prepared();
    c.seeds = vec![5];
    c.tasks = vec![GENERATION_TASK.to_string()];
    let bundle = run_experiment(&c).unwrap();
    let path = dir.path().join("reports.jsonl");
    write_reports(&path, &bundle.reports).unwrap();
    assert_eq!(read_reports(&path).unwrap(), bundle.reports);
    assert_eq!(render_report(&read_reports(&path).unwrap()), render_report(&bundle.reports));
}

#[test]
fn fewshot_errors_name_a_short_class() {
    let (_dir, mut c) = prepared();
    c.seeds = vec![1];
    c.fewshot_k = vec![10_000];
    let ws = Workspace::load(c).unwrap();
    match ws.run(ExperimentKind::Fewshot) {
        Err(Error::Sampling { class, requested, .. }) => {
            assert!(!class.is_empty());
            assert_eq!(requested, 10_000);
        }
        other => panic!("expected a sampling error, got {:?}", other.map(|b| b.groups())),
    }
}

#[test]
fn unknown_task_is_rejected_before_any_work() {
    let text = format!("{TINY}\ntasks = intent detection, weather forecast\n");
    match ExperimentConfig::parse(&text) {
        Err(Error::Registry(msg)) => assert!(msg.contains("weather forecast")),
        other => panic!("expected a registry error, got {:?}", other.map(|c| c.tasks)),
    }
    let (_dir, c) = prepared();
    assert_eq!(groups(&c, ExperimentKind::Unseen), ["unseen"]);
}
