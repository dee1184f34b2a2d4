mod common;

use std::fs;

use trajcurate::prompts::{ingest_synthesized, render_judge_prompt, render_reasoning_prompt, SynthesizedResponse};
use trajcurate::trajectory::{load_curated, write_curated, ReasoningOrigin};

use common::{golden_dir, golden_steps};

/// Set `TRAJCURATE_BLESS=1` to rewrite the golden files after an intended
/// template change.
fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("TRAJCURATE_BLESS").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(
        expected == actual,
        "{} differs from the rendered prompt",
        path.display()
    );
}

#[test]
fn reasoning_prompts_match_golden_files() {
    for (name, step) in golden_steps() {
        check_golden(
            &format!("{name}.reasoning.txt"),
            &render_reasoning_prompt(&step).unwrap(),
        );
    }
}

#[test]
fn judge_prompts_match_golden_files() {
    for (name, step) in golden_steps() {
        let p = render_judge_prompt(&step).unwrap();
        assert!(p.ends_with("Score: <number between 1 and 5>\n"));
        check_golden(&format!("{name}.judge.txt"), &p);
    }
}

fn conforming(action: &str) -> String {
    format!(
        "<think>\nThe form needs this value before searching.\n</think>\n\n<memory>\nFilled the search box.\n</memory>\n\n<action>\n{action}\n</action>"
    )
}

#[test]
fn ingest_round_trip_through_files() {
    let steps: Vec<_> = golden_steps().into_iter().map(|(_, s)| s).collect();
    let dir = tempfile::tempdir().unwrap();
    let curated = dir.path().join("curated.jsonl");
    write_curated(&steps, &curated).unwrap();
    let loaded = load_curated(&curated).unwrap();
    assert_eq!(loaded, steps);

    let good = SynthesizedResponse {
        key: steps[0].key(),
        output: conforming(&steps[0].action.to_string()),
    };
    let mutated = SynthesizedResponse {
        key: steps[1].key(),
        output: conforming("scroll(0, -200)"),
    };
    let out = ingest_synthesized(&loaded, &[good, mutated]);
    assert_eq!(out.accepted, 1);
    assert_eq!(out.steps[0].reasoning_origin, ReasoningOrigin::Synthesized);
    assert!(out.steps[0].reasoning.contains("Filled the search box."));
    assert_eq!(out.steps[1], steps[1]);
    assert!(out.rejections[0].reason.contains("differs from gold"));

    let empty_memory = SynthesizedResponse {
        key: steps[1].key(),
        output: "<think>\nScroll to see more.\n</think>\n<memory>\n</memory>\n<action>\nscroll(0, 200)\n</action>"
            .into(),
    };
    let out = ingest_synthesized(&loaded, &[empty_memory]);
    assert_eq!(out.accepted, 0);
    assert_eq!(out.rejections[0].reason, "empty <memory> block");
    assert_eq!(out.steps, steps);
}
