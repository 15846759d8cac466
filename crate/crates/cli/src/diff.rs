use std::path::Path;

use serde_json::Value;

use crate::artifacts::read_json;
use crate::error::CliResult;

const FIELDS: [&str; 4] = ["zero_shot", "cls_cache_only", "mp_cache_only", "combined"];

fn number(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |acc, k| acc.get(k))?.as_f64()
}

/// Field-wise deltas (`b − a`) of accuracies and mixing weights.
pub fn diff_lines(a: &Value, b: &Value) -> Vec<String> {
    let mut paths: Vec<Vec<&str>> = FIELDS.iter().map(|f| vec!["accuracies", f]).collect();
    paths.push(vec!["alpha"]);
    paths.push(vec!["beta"]);
    let mut out = Vec::new();
    for p in paths {
        let name = p.join(".");
        match (number(a, &p), number(b, &p)) {
            (Some(x), Some(y)) if x != y => {
                out.push(format!("{name}: {x:.4} -> {y:.4} ({:+.4})", y - x));
            }
            (Some(_), Some(_)) | (None, None) => {}
            (x, y) => out.push(format!("{name}: {x:?} -> {y:?}")),
        }
    }
    out
}

pub fn report_diff(a: &Path, b: &Path) -> CliResult<()> {
    let va: Value = read_json(a)?;
    let vb: Value = read_json(b)?;
    let lines = diff_lines(&va, &vb);
    if lines.is_empty() {
        println!("no differences");
    } else {
        for l in lines {
            println!("{l}");
        }
    }
    Ok(())
}
