//! `xcnn report`: fold the artifacts of a finished run into one Markdown
//! summary. Reads only — regenerating the report never perturbs the run
//! directory, so repeated invocations are byte-identical.

use std::path::Path;

use crate::error::{config_err, CliError};
use crate::manifest::{Manifest, MANIFEST_FILE};

const REQUIRED: [&str; 4] = ["curves.csv", "metrics.csv", "confusion.csv", MANIFEST_FILE];

pub fn run(out: &Path) -> Result<(), CliError> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|name| !out.join(name).is_file())
        .map(|name| name.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts(missing));
    }

    let read = |name: &str| -> Result<String, CliError> {
        std::fs::read_to_string(out.join(name))
            .map_err(|e| config_err(format!("cannot read {name}: {e}")))
    };
    let curves = read("curves.csv")?;
    let metrics = read("metrics.csv")?;
    let confusion = read("confusion.csv")?;
    let manifest = Manifest::read(out)?;

    let mut roc_files: Vec<String> = list_dir(out, |name| {
        name.starts_with("roc_") && name.ends_with(".csv")
    })?;
    roc_files.sort();
    let mut heatmaps: Vec<String> = match out.join("heatmaps").is_dir() {
        true => list_dir(&out.join("heatmaps"), |_| true)?
            .into_iter()
            .map(|name| format!("heatmaps/{name}"))
            .collect(),
        false => Vec::new(),
    };
    heatmaps.sort();

    let report = build_report(
        &curves,
        &metrics,
        &confusion,
        &manifest,
        &roc_files,
        &heatmaps,
        out.join("model.ckpt").is_file(),
    );
    std::fs::write(out.join("report.md"), &report)
        .map_err(|e| config_err(format!("cannot write report.md: {e}")))?;
    println!("wrote report.md in {}", out.display());
    Ok(())
}

fn list_dir(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| config_err(format!("cannot list {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| config_err(format!("cannot list {}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && keep(&name) {
            names.push(name);
        }
    }
    Ok(names)
}

/// Render a CSV body as a Markdown pipe table, embedding cells verbatim.
fn md_table(csv: &str) -> String {
    let mut rows = csv.lines().filter(|l| !l.is_empty());
    let Some(header) = rows.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut table = format!("| {} |\n", header.split(',').collect::<Vec<_>>().join(" | "));
    table.push_str(&format!("|{}\n", " --- |".repeat(cols)));
    for row in rows {
        let mut cells: Vec<&str> = row.split(',').collect();
        cells.resize(cols, "");
        table.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    table
}

fn build_report(
    curves: &str,
    metrics: &str,
    confusion: &str,
    manifest: &Manifest,
    roc_files: &[String],
    heatmaps: &[String],
    have_checkpoint: bool,
) -> String {
    let mut md = String::from("# Run Report\n\n## Training\n\n");

    let epoch_rows: Vec<&str> = curves.lines().skip(1).filter(|l| !l.is_empty()).collect();
    md.push_str(&format!("- epochs run: {}\n", epoch_rows.len()));
    if let Some(best) = manifest.note("train", "best_epoch") {
        md.push_str(&format!("- best epoch: {best}"));
        if let Some(loss) = manifest.note("train", "best_val_loss") {
            md.push_str(&format!(" (validation loss {loss})"));
        }
        md.push('\n');
    }
    if let Some(stopped) = manifest.note("train", "stopped_early") {
        md.push_str(&format!("- stopped early: {stopped}\n"));
    }
    // curves.csv columns: epoch,train_loss,train_acc,val_loss,val_acc
    if let Some(last) = epoch_rows.last() {
        let cells: Vec<&str> = last.split(',').collect();
        if cells.len() >= 5 {
            md.push_str(&format!(
                "- final epoch: train loss {}, validation loss {}\n",
                cells[1], cells[3]
            ));
        }
    }

    md.push_str("\n## Test metrics\n\n");
    if let Some(acc) = manifest.note("evaluate", "accuracy") {
        md.push_str(&format!("Test accuracy: {acc}\n\n"));
    }
    md.push_str(&md_table(metrics));

    md.push_str("\n## Confusion matrix\n\nRows are true classes, columns are predictions.\n\n");
    md.push_str(&md_table(confusion));

    md.push_str("\n## Artifacts\n\n- curves.csv\n");
    if have_checkpoint {
        md.push_str("- model.ckpt\n");
    }
    md.push_str("- metrics.csv\n- confusion.csv\n");
    for roc in roc_files {
        md.push_str(&format!("- {roc}\n"));
    }
    for heatmap in heatmaps {
        md.push_str(&format!("- {heatmap}\n"));
    }
    md
}

// ── Tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::RunRecord;
    use std::collections::BTreeMap;

    #[test]
    fn md_table_embeds_cells_verbatim() {
        let csv = "class,precision,recall\nbenign,0.9591,1\nmalignant,0.75,0.5\n";
        let table = md_table(csv);
        assert!(table.starts_with("| class | precision | recall |\n| --- | --- | --- |\n"));
        assert!(table.contains("| benign | 0.9591 | 1 |"));
        assert!(table.contains("| malignant | 0.75 | 0.5 |"));
    }

    #[test]
    fn md_table_pads_ragged_rows() {
        let table = md_table("a,b,c\n1,2\n");
        assert!(table.contains("| 1 | 2 |  |"));
    }

    #[test]
    fn report_is_deterministic_and_embeds_metrics() {
        let mut manifest = Manifest::default();
        let mut notes = BTreeMap::new();
        notes.insert("best_epoch".to_string(), "2".to_string());
        notes.insert("best_val_loss".to_string(), "0.9".to_string());
        notes.insert("stopped_early".to_string(), "true".to_string());
        manifest.runs.insert(
            "train".to_string(),
            RunRecord {
                notes,
                ..RunRecord::default()
            },
        );
        let curves = "epoch,train_loss,train_acc,val_loss,val_acc\n1,1.5,0.4,1.2,0.5\n2,1.0,0.6,0.9,0.7\n";
        let metrics = "class,precision,recall,f1,support,auc,degenerate\nmacro,1,1,1,3,,\n";
        let confusion = "true/pred,a,b\na,2,0\nb,0,1\n";
        let one = build_report(curves, metrics, confusion, &manifest, &[], &[], true);
        let two = build_report(curves, metrics, confusion, &manifest, &[], &[], true);
        assert_eq!(one, two);
        assert!(one.contains("- epochs run: 2\n"));
        assert!(one.contains("- best epoch: 2 (validation loss 0.9)\n"));
        assert!(one.contains("- final epoch: train loss 1, validation loss 0.9\n"));
        assert!(one.contains("| macro | 1 | 1 | 1 | 3 |  |  |"));
        assert!(one.contains("- model.ckpt\n"));
    }
}
