//! JSON and table renderings of the reports produced by `psc-core`.

use std::fmt::Write;

use psc_core::graph::{ParamReport, RewriteOutcome, RewriteReport};
use psc_core::train::{CurveReport, History};
use psc_core::verify::SuiteReport;
use serde_json::{json, Value};

pub fn params_value(r: &ParamReport) -> Value {
    let rows: Vec<Value> = r
        .rows
        .iter()
        .filter(|row| row.params > 0)
        .map(|row| json!({ "id": row.id, "op": row.kind, "params": row.params }))
        .collect();
    json!({ "layers": rows, "total": r.total })
}

pub fn params_table(r: &ParamReport) -> String {
    let width = r.rows.iter().map(|row| row.id.len()).max().unwrap_or(2).max(5);
    let mut s = format!("{:<width$}  {:<9}  {:>12}\n", "layer", "op", "params");
    for row in r.rows.iter().filter(|row| row.params > 0) {
        let _ = writeln!(s, "{:<width$}  {:<9}  {:>12}", row.id, row.kind, row.params);
    }
    let _ = writeln!(s, "{:<width$}  {:<9}  {:>12}", "total", "", r.total);
    s
}

pub fn rewrite_value(r: &RewriteReport, outcome: &RewriteOutcome) -> Value {
    let replaced: Vec<Value> = outcome
        .replaced
        .iter()
        .map(|g| json!({ "nodes": g.group.node_ids, "block": g.block_id, "M": g.spec.subspace_filters }))
        .collect();
    let skipped: Vec<Value> =
        outcome.skipped.iter().map(|g| json!({ "nodes": g.group.node_ids, "reason": g.reason })).collect();
    json!({
        "total_before": r.total_before,
        "total_after": r.total_after,
        "reduction_pct": r.reduction_pct,
        "groups_replaced": r.groups_replaced,
        "groups_skipped": r.groups_skipped,
        "replaced": replaced,
        "skipped": skipped,
    })
}

pub fn rewrite_table(r: &RewriteReport, outcome: &RewriteOutcome) -> String {
    let mut s = format!(
        "params before {}\nparams after  {}\nreduction     {:.2}%\ngroups replaced {}, skipped {}\n",
        r.total_before, r.total_after, r.reduction_pct, r.groups_replaced, r.groups_skipped
    );
    for g in &outcome.skipped {
        let _ = writeln!(s, "skipped {:?}: {}", g.group.node_ids, g.reason);
    }
    s
}

pub fn suite_value(r: &SuiteReport) -> Value {
    let cases: Vec<Value> =
        r.cases.iter().map(|c| json!({ "seed": c.seed, "residual": finite(c.residual), "detail": c.detail })).collect();
    json!({
        "suite": r.suite,
        "tolerance": r.tolerance,
        "max_residual": finite(r.max_residual()),
        "passed": r.passed(),
        "cases": cases,
    })
}

pub fn suite_table(r: &SuiteReport) -> String {
    let mut s = format!("{:>6}  {:>12}  detail\n", "seed", "residual");
    for c in &r.cases {
        let _ = writeln!(s, "{:>6}  {:>12.3e}  {}", c.seed, c.residual, c.detail);
    }
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    let _ = writeln!(s, "{}: max residual {:.3e} (tolerance {:e}) {verdict}", r.suite, r.max_residual(), r.tolerance);
    s
}

/// JSON has no representation for NaN or infinities.
fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

pub fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,wall_time_ms\n");
    let _ = writeln!(s, "0,{:e},{:e},0", h.initial_train_loss, h.initial_val_loss);
    for e in &h.epochs {
        let _ = writeln!(s, "{},{:e},{:e},{:.3}", e.epoch, e.train_loss, e.val_loss, e.wall_time_ms);
    }
    s
}

pub fn history_value(h: &History) -> Value {
    json!({
        "initial_train_loss": h.initial_train_loss,
        "initial_val_loss": h.initial_val_loss,
        "final_train_loss": h.final_train_loss(),
        "final_val_loss": h.epochs.last().map_or(h.initial_val_loss, |e| e.val_loss),
        "epochs": h.epochs.len(),
    })
}

pub fn curve_value(r: &CurveReport) -> Value {
    let models: Vec<Value> = (0..2)
        .map(|k| {
            let h = &r.histories[k];
            json!({
                "model": r.labels[k],
                "params": r.params[k],
                "train_loss": h.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
                "val_loss": h.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "task": r.task, "models": models })
}

/// Both curves side by side, sampled every `every` epochs.
pub fn curve_table(r: &CurveReport, every: usize) -> String {
    let mut s = format!(
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "epoch",
        format!("{} train", r.labels[0]),
        format!("{} val", r.labels[0]),
        format!("{} train", r.labels[1]),
        format!("{} val", r.labels[1])
    );
    let n = r.histories[0].epochs.len().min(r.histories[1].epochs.len());
    for i in (0..n).filter(|i| (i + 1) % every.max(1) == 0 || i + 1 == n) {
        let (a, b) = (&r.histories[0].epochs[i], &r.histories[1].epochs[i]);
        let _ = writeln!(
            s,
            "{:>6}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>12.4e}",
            a.epoch, a.train_loss, a.val_loss, b.train_loss, b.val_loss
        );
    }
    let _ = writeln!(s, "params: {} {}, {} {}", r.labels[0], r.params[0], r.labels[1], r.params[1]);
    s
}
