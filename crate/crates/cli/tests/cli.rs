use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fsod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsod")).args(args).output().expect("spawn fsod")
}

fn ok(args: &[&str]) -> Output {
    let out = fsod(args);
    assert!(out.status.success(), "fsod {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// Synthetic task plus a config pointing at it.
fn task(dir: &Path, gen_args: &[&str], extra_toml: &str) -> PathBuf {
    let mut args = vec!["synth", "gen", "--out", s(dir)];
    args.extend_from_slice(gen_args);
    ok(&args);
    let cfg = dir.join("task.toml");
    let text = format!(
        "[paths]\nsupport_json = \"support.json\"\nsupport_embeddings = \"support.cdfe\"\n\
         proposals = \"proposals.json\"\nproposal_embeddings = \"proposals.cdfe\"\n\
         query_images = \"query_gt.json\"\nground_truth = \"query_gt.json\"\n{extra_toml}"
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn clean_synthetic_task_scores_perfect_map() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    let out = t.path().join("run");
    ok(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["map"].as_f64(), Some(1.0));
    assert_eq!(json(&out.join("results.json")).as_array().unwrap().len(), 15);
}

#[test]
fn empty_proposals_give_empty_results_and_zero_map() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    fs::write(t.path().join("proposals.json"), "[]").unwrap();
    let out = t.path().join("run");
    ok(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    assert_eq!(json(&out.join("results.json")), Value::Array(vec![]));
    assert_eq!(json(&out.join("report.json"))["map"].as_f64(), Some(0.0));
}

#[test]
fn reruns_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &["--spread", "0.6", "--seed", "7"], "[[postproc]]\nop = \"soft_nms\"\n[pseudo]\nrounds = 2\n");
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for o in [&a, &b] {
        ok(&["--config", s(&cfg), "match", "run", "--out", s(o)]);
        ok(&["--config", s(&cfg), "pseudo", "round", "--out", s(&o.join("pseudo"))]);
        ok(&["--config", s(&cfg), "proto", "build", "--out", s(o)]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() >= 8);
    assert_eq!(fa, fb);

    let (g1, g2) = (t.path().join("g1"), t.path().join("g2"));
    ok(&["--seed", "3", "synth", "gen", "--spread", "0.5", "--out", s(&g1)]);
    ok(&["--seed", "3", "synth", "gen", "--spread", "0.5", "--out", s(&g2)]);
    assert_eq!(files(&g1), files(&g2));
}

#[test]
fn seed_changes_synthetic_data() {
    let t = tempfile::tempdir().unwrap();
    let (g1, g2) = (t.path().join("g1"), t.path().join("g2"));
    ok(&["--seed", "1", "synth", "gen", "--out", s(&g1)]);
    ok(&["--seed", "2", "synth", "gen", "--out", s(&g2)]);
    assert_ne!(fs::read(g1.join("support.cdfe")).unwrap(), fs::read(g2.join("support.cdfe")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "[matcher]\nbogus_key = 1\n");
    assert_eq!(fsod(&["--config", s(&cfg), "match", "run", "--out", s(t.path())]).status.code(), Some(2));

    let cfg = task(t.path(), &[], "[diffusion]\nalpha = 1.5\n");
    assert_eq!(fsod(&["--config", s(&cfg), "match", "run", "--out", s(t.path())]).status.code(), Some(2));

    assert_eq!(fsod(&["match", "run", "--out", s(t.path())]).status.code(), Some(2));
    assert_eq!(fsod(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fsod(&["eval", "score", "--cells", "1,2,3", "--out", s(t.path())]).status.code(), Some(2));
    assert_eq!(fsod(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_3_without_partial_output() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    fs::write(t.path().join("query_gt.json"), "{ not json").unwrap();
    let out = t.path().join("run");
    let r = fsod(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.join("results.json").exists());
    assert!(!out.join("report.json").exists());

    let missing = t.path().join("nope.cdfe");
    assert_eq!(fsod(&["embed", "inspect", s(&missing)]).status.code(), Some(3));
}

#[test]
fn failed_rerun_keeps_previous_output_intact() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    let out = t.path().join("run");
    ok(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    let before = files(&out);
    fs::write(t.path().join("proposals.json"), "[{\"image_id\": 1}]").unwrap();
    assert_eq!(fsod(&["--config", s(&cfg), "match", "run", "--out", s(&out)]).status.code(), Some(3));
    assert_eq!(files(&out), before);
}

#[test]
fn zero_rounds_leave_support_unchanged() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    let support = fs::read(t.path().join("support.json")).unwrap();
    let out = t.path().join("p");
    ok(&["--config", s(&cfg), "pseudo", "round", "--rounds", "0", "--out", s(&out)]);
    assert_eq!(json(&out.join("rounds.json")), Value::Array(vec![]));
    assert!(!out.join("round_1").exists());
    assert_eq!(fs::read(t.path().join("support.json")).unwrap(), support);
}

#[test]
fn one_round_on_perfect_matcher_keeps_ground_truth() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "[pseudo.policy]\ntau = 0.3\n");
    let out = t.path().join("p");
    ok(&["--config", s(&cfg), "pseudo", "round", "--rounds", "1", "--out", s(&out)]);
    let support = json(&t.path().join("support.json"));
    let merged = json(&out.join("round_1/merged.json"));
    let gt = support["annotations"].as_array().unwrap();
    let all = merged["annotations"].as_array().unwrap();
    assert!(all.len() > gt.len());
    for a in gt {
        assert!(all.contains(a), "ground-truth annotation {a} lost");
    }
    let inspect = ok(&["embed", "inspect", s(&out.join("round_1/support.cdfe"))]);
    let v: Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(v["count"].as_u64(), Some(all.len() as u64));
}

#[test]
fn tau_one_adds_nothing_over_two_rounds() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    let out = t.path().join("p");
    ok(&["--config", s(&cfg), "pseudo", "round", "--rounds", "2", "--tau", "1", "--out", s(&out)]);
    let rounds = json(&out.join("rounds.json"));
    let rounds = rounds.as_array().unwrap();
    assert_eq!(rounds.len(), 2);
    for r in rounds {
        assert_eq!(r["added"].as_u64(), Some(0));
        assert_eq!(r["annotations"].as_u64(), Some(15));
    }
}

#[test]
fn threshold_search_needs_ground_truth() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "[pseudo]\noptimize_thresholds = true\n");
    let out = t.path().join("p");
    ok(&["--config", s(&cfg), "pseudo", "round", "--out", s(&out)]);
    assert!(out.join("round_1/thresholds.json").exists());

    let text = fs::read_to_string(&cfg).unwrap().replace("ground_truth = \"query_gt.json\"\n", "");
    fs::write(&cfg, text).unwrap();
    let r = fsod(&["--config", s(&cfg), "pseudo", "round", "--out", s(&t.path().join("q"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn score_from_cells_reproduces_a_table_row() {
    let t = tempfile::tempdir().unwrap();
    // Dataset-major cells of a leaderboard row published at 192.79.
    let cells = "34.61,41.14,42.06,63.26,63.00,61.29,39.71,47.43,48.30";
    ok(&["eval", "score", "--cells", cells, "--out", s(t.path())]);
    assert_eq!(json(&t.path().join("score.json"))["score"].as_f64(), Some(192.79));
}

#[test]
fn submission_scores_nine_tasks() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    let out = t.path().join("run");
    ok(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    let mut toml = String::new();
    for d in 1..=3 {
        for k in [1, 5, 10] {
            toml.push_str(&format!(
                "[[submission]]\ndataset = {d}\nshot = {k}\nresults = \"run/results.json\"\nground_truth = \"query_gt.json\"\n"
            ));
        }
    }
    let sub = t.path().join("submission.toml");
    fs::write(&sub, toml).unwrap();
    ok(&["--config", s(&sub), "eval", "score", "--out", s(t.path())]);
    let card = json(&t.path().join("score.json"));
    assert_eq!(card["score"].as_f64(), Some(400.0));
    assert_eq!(card["tasks"].as_array().unwrap().len(), 9);

    let partial: String = fs::read_to_string(&sub).unwrap().split("[[submission]]").take(9).collect::<Vec<_>>().join("[[submission]]");
    fs::write(&sub, partial).unwrap();
    assert_eq!(fsod(&["--config", s(&sub), "eval", "score", "--out", s(t.path())]).status.code(), Some(2));
}

#[test]
fn eval_map_matches_match_report() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &["--spread", "0.8"], "");
    let out = t.path().join("run");
    ok(&["--config", s(&cfg), "match", "run", "--out", s(&out)]);
    let e = t.path().join("eval");
    ok(&["eval", "map", "--results", s(&out.join("results.json")), "--ground-truth", s(&t.path().join("query_gt.json")), "--out", s(&e)]);
    assert_eq!(json(&e.join("report.json")), json(&out.join("report.json")));
}

#[test]
fn post_chain_merges_and_filters() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(
        t.path(),
        &[],
        "[[postproc]]\nop = \"merge\"\nstrategy = \"wbf\"\n[[postproc]]\nop = \"topk\"\nk = 2\n",
    );
    let out = t.path().join("post");
    let props = t.path().join("proposals.json");
    ok(&["--config", s(&cfg), "post", "apply", "--input", s(&props), "--input", s(&props), "--out", s(&out)]);
    let dets = json(&out.join("post.json"));
    let dets = dets.as_array().unwrap();
    // Identical inputs fuse one-to-one; top-2 of 4 objects per image.
    let images = json(&t.path().join("query_gt.json"))["images"].as_array().unwrap().len();
    assert_eq!(dets.len(), 2 * images);

    let bad = task(t.path(), &[], "[[postproc]]\nop = \"topk\"\nk = 2\n[[postproc]]\nop = \"merge\"\nstrategy = \"nms\"\n");
    let r = fsod(&["--config", s(&bad), "post", "apply", "--input", s(&props), "--out", s(&t.path().join("bad"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!t.path().join("bad/post.json").exists());
}

#[test]
fn proto_build_and_inspect() {
    let t = tempfile::tempdir().unwrap();
    let cfg = task(t.path(), &[], "");
    ok(&["--config", s(&cfg), "proto", "build", "--out", s(t.path())]);
    let out = ok(&["embed", "inspect", s(&t.path().join("prototypes.cdfe"))]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["count"].as_u64(), Some(3));
    assert_eq!(v["labeled"].as_u64(), Some(3));
    assert_eq!(v["dim"].as_u64(), Some(16));
}

#[test]
fn diffuse_keeps_record_order_and_ids() {
    let t = tempfile::tempdir().unwrap();
    task(t.path(), &["--objects-per-image", "2"], "");
    let props = t.path().join("proposals.json");
    ok(&["diffuse", "--input", s(&props), "--out", s(t.path())]);
    let before = json(&props);
    let after = json(&t.path().join("diffused.json"));
    let (b, a) = (before.as_array().unwrap(), after.as_array().unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in b.iter().zip(a) {
        assert_eq!(x["id"], y["id"]);
        assert_eq!(x["bbox"], y["bbox"]);
    }
}
