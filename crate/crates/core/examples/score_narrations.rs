//! Score generations with ROUGE-L and class match, and fit a least-squares line.
//!
//! cargo run --example score_narrations

use icl_lab::corpus::{Action, SurfaceLexicon};
use icl_lab::evaluation::{external_scores, ols, rouge_l, score};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> icl_lab::Result<()> {
    let r = rouge_l(&words("the camera wearer cuts a carrot"), &words("the camera wearer slices a carrot"));
    println!("ROUGE-L p={:.4} r={:.4} f={:.4}", r.precision, r.recall, r.f1);

    // Verb class 0 is "cuts" or "slices"; noun class 0 is "carrot".
    let lexicon = SurfaceLexicon::from_surfaces(
        vec![vec!["cuts".into(), "slices".into()], vec!["washes".into()]],
        vec![vec!["carrot".into()], vec!["knife".into()]],
    )?;
    let gold = words("the camera wearer cuts a carrot");
    for hyp in ["the camera wearer slices a carrot", "the camera wearer washes a carrot", "the camera wearer"] {
        let m = score(&words(hyp), &gold, Action::new(0, 0), &lexicon);
        println!("{hyp:<36} rouge_l {:.3} class_match {:.2}", m.rouge_l_f, m.class_match);
    }

    // Any program that reads `reference<TAB>hypothesis` lines and writes one
    // score per line can stand in for a learned similarity model.
    let pairs = vec![
        ("the camera wearer cuts a carrot".to_string(), "the camera wearer cuts a carrot".to_string()),
        ("the camera wearer cuts a carrot".to_string(), "the camera wearer washes a knife".to_string()),
    ];
    let script = r#"awk -F'\t' '{ print ($1 == $2) }' "$0" > "$1""#;
    let dir = std::env::temp_dir().join("icl-lab-scorer");
    std::fs::create_dir_all(&dir)?;
    let scores = external_scores("sh", &["-c".into(), script.into()], &pairs, &dir)?;
    println!("external exact-match scorer: {scores:?}");

    let fit = ols(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0])?;
    println!("y = {:.2} + {:.2}x, R² = {:.2}", fit.intercept, fit.slope, fit.r_squared);
    Ok(())
}
