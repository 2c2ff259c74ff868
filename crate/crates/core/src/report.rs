//! Plain-text tables over the JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::adapter_io::Manifest;
use crate::alignment::AlignmentReport;
use crate::behavior_link::LinkReport;
use crate::classify::{CellResult, EvalReport, FeatureSplit, ModuleSplit};
use crate::pca::PcaReport;

/// Column-aligned text table; the first column is left-aligned, the rest
/// right-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, header: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        let mut out = format!("{}\n{}\n{}\n", self.title, line(&self.header), "-".repeat(total));
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn f2(x: f64) -> String {
    format!("{x:.2}")
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn ci(c: &CellResult) -> String {
    format!("[{:.2}, {:.2}]", c.ci.low, c.ci.high)
}

fn p_value(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Category, method, count and intensity range per group.
pub fn population_table(manifest: &Manifest) -> Table {
    let mut t = Table::new("Adapter population", &["group", "category", "method", "n", "intensity"]);
    let mut groups: BTreeMap<(String, String), (String, usize, Vec<u64>)> = BTreeMap::new();
    for e in &manifest.entries {
        let g = groups
            .entry((e.category.as_str().to_string(), e.group().to_string()))
            .or_insert_with(|| (e.method.clone(), 0, Vec::new()));
        g.1 += 1;
        g.2.extend(e.intensity);
    }
    for ((category, group), (method, n, levels)) in groups {
        let range = match (levels.iter().min(), levels.iter().max()) {
            (Some(a), Some(b)) if a == b => a.to_string(),
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => "varied seeds".into(),
        };
        t.push(vec![group, category, method, n.to_string(), range]);
    }
    t.push(vec!["total".into(), String::new(), String::new(), manifest.entries.len().to_string(), String::new()]);
    t
}

/// The full-feature, both-module cell, or the widest one available.
fn headline(report: &EvalReport, name: &str) -> Option<(String, String, CellResult)> {
    let grid = report.comparisons.get(name)?;
    for fs in [FeatureSplit::All, FeatureSplit::Direction, FeatureSplit::Shape, FeatureSplit::Magnitude] {
        if let Some(c) = grid.get(fs.as_str()).and_then(|m| m.get(ModuleSplit::Both.as_str())) {
            return Some((fs.as_str().into(), ModuleSplit::Both.as_str().into(), *c));
        }
    }
    let (fs, m) = grid.iter().next()?;
    let (ms, c) = m.iter().next()?;
    Some((fs.clone(), ms.clone(), *c))
}

pub fn pairwise_table(report: &EvalReport) -> Table {
    let mut t = Table::new(
        "Pairwise classification AUC",
        &["comparison", "AUC", "95% CI", "features", "modules", "n_test"],
    );
    for name in &report.comparison_order {
        if let Some((fs, ms, c)) = headline(report, name) {
            t.push(vec![name.clone(), f2(c.auc), ci(&c), fs, ms, c.n_test.to_string()]);
        }
    }
    t
}

/// AUC per module split, using the widest feature split evaluated.
pub fn module_table(report: &EvalReport) -> Table {
    let mut t = Table::new(
        "Module-split classification",
        &["comparison", "q_proj", "q_proj CI", "v_proj", "v_proj CI", "both", "both CI"],
    );
    for name in &report.comparison_order {
        let Some((fs, _, _)) = headline(report, name) else { continue };
        let Some(cells) = report.comparisons.get(name).and_then(|g| g.get(&fs)) else { continue };
        let mut row = vec![name.clone()];
        for ms in [ModuleSplit::Query, ModuleSplit::Value, ModuleSplit::Both] {
            match cells.get(ms.as_str()) {
                Some(c) => row.extend([f2(c.auc), ci(c)]),
                None => row.extend([String::from("-"), String::from("-")]),
            }
        }
        t.push(row);
    }
    t
}

/// AUC per feature family, on both modules.
pub fn family_table(report: &EvalReport) -> Table {
    let splits = [FeatureSplit::Magnitude, FeatureSplit::Shape, FeatureSplit::Direction, FeatureSplit::All];
    let mut header = vec!["comparison"];
    header.extend(splits.iter().map(|s| s.as_str()));
    let mut t = Table::new("Feature-family classification", &header);
    for name in &report.comparison_order {
        let Some(grid) = report.comparisons.get(name) else { continue };
        let mut row = vec![name.clone()];
        for fs in splits {
            let cell = grid.get(fs.as_str()).and_then(|m| m.get(ModuleSplit::Both.as_str()));
            row.push(cell.map_or("-".into(), |c| f2(c.auc)));
        }
        t.push(row);
    }
    t
}

pub fn summary_table(report: &EvalReport) -> Table {
    let mut t = Table::new("Summary", &["finding", "metric", "notes"]);
    if let Some(name) = report.comparison_order.first() {
        if let Some((_, _, c)) = headline(report, name) {
            t.push(vec![format!("binary detection ({name})"), format!("AUC {}", f2(c.auc)), format!("CI {}", ci(&c))]);
        }
    }
    let pairs: Vec<f64> = report
        .comparison_order
        .iter()
        .skip(1)
        .filter_map(|n| headline(report, n).map(|h| h.2.auc))
        .collect();
    if !pairs.is_empty() {
        let perfect = pairs.iter().filter(|a| **a >= 0.995).count();
        t.push(vec![
            "pairwise comparisons".into(),
            format!("min AUC {}", f2(pairs.iter().copied().fold(f64::INFINITY, f64::min))),
            format!("{perfect}/{} at 1.00", pairs.len()),
        ]);
    }
    for o in &report.ordinal {
        t.push(vec![
            format!("ordinal severity ({})", o.group),
            format!("rho = {}", f3(o.rho)),
            format!("p {}, {} levels", p_value(o.p_value), o.n_levels),
        ]);
    }
    if let Some(x) = report.cross_method.first() {
        t.push(vec!["cross-method detector".into(), x.train.clone(), String::new()]);
    }
    for x in &report.cross_method {
        t.push(vec![
            format!("cross-method to {}", x.test),
            format!("AUC {}", f2(x.result.auc)),
            format!("CI {}", ci(&x.result)),
        ]);
    }
    for (family, imp) in &report.importance.families {
        t.push(vec![
            format!("importance ({})", family.as_str()),
            format!("mean |w| {}", f3(imp.mean_abs_weight)),
            format!("{} columns", imp.n_columns),
        ]);
    }
    for (ratio, v) in &report.importance.ratios {
        t.push(vec![format!("importance ratio {ratio}"), format!("{v:.1}x"), String::new()]);
    }
    t
}

pub fn pca_table(pca: &PcaReport) -> Table {
    let mut t = Table::new(
        &format!("Principal components (n = {})", pca.n),
        &["component", "variance", "type AUC", "intensity rho", "rho p", "orientation"],
    );
    for c in &pca.components {
        let (rho, p, orient) = match &c.intensity_rho {
            Some(r) => (f3(r.rho), p_value(r.p_value), if r.orientation < 0 { "-" } else { "+" }.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        t.push(vec![
            format!("PC{}", c.component),
            format!("{:.1}%", 100.0 * c.explained_variance_ratio),
            c.objective_auc.as_ref().map_or("-".into(), |a| f2(a.auc)),
            rho,
            p,
            orient,
        ]);
    }
    t
}

pub fn link_tables(link: &LinkReport) -> Vec<Table> {
    let mut e = Table::new(
        "ASR elevation over healthy",
        &["group", "mean ASR", "healthy", "delta", "flagged", "n"],
    );
    for x in &link.elevation {
        e.push(vec![
            x.group_a.clone(),
            f3(x.mean_a),
            f3(x.mean_b),
            format!("{:+.3}", x.delta),
            if x.flagged { "yes" } else { "no" }.into(),
            x.n_a.to_string(),
        ]);
    }
    let mut d = Table::new("Behavior correlations", &["analysis", "rho", "p", "n"]);
    let g = &link.geometry_behavior;
    let excluded: Vec<&str> = g.excluded_categories.iter().map(|c| c.as_str()).collect();
    d.push(vec![
        format!(
            "drift probability vs ASR (excluding {})",
            if excluded.is_empty() { "none".into() } else { excluded.join(", ") }
        ),
        f3(g.rho),
        p_value(g.p_value),
        g.n.to_string(),
    ]);
    for x in &link.dose_response {
        d.push(vec![
            format!("dose-response ({})", x.group),
            f3(x.rho),
            p_value(x.p_value),
            format!("{} levels", x.levels.len()),
        ]);
    }
    for x in &link.frobenius {
        d.push(vec![format!("Frobenius vs ASR ({})", x.group), f3(x.rho), p_value(x.p_value), x.n.to_string()]);
    }
    vec![e, d]
}

pub fn alignment_table(reports: &[AlignmentReport]) -> Table {
    let mut t = Table::new(
        "Weight-activation alignment",
        &["adapter", "module", "k", "max", "mean", "mean/baseline"],
    );
    for r in reports {
        t.push(vec![
            r.adapter_id.clone(),
            r.module.as_str().into(),
            r.k.to_string(),
            f3(r.max),
            f3(r.mean),
            format!("{:.2}", r.mean_ratio),
        ]);
    }
    t
}

/// Every table the available inputs support, in reading order.
pub fn tables(
    eval: &EvalReport,
    manifest: Option<&Manifest>,
    pca: Option<&PcaReport>,
    link: Option<&LinkReport>,
    alignment: Option<&[AlignmentReport]>,
) -> Vec<(&'static str, Table)> {
    let mut out = Vec::new();
    if let Some(m) = manifest {
        out.push(("population", population_table(m)));
    }
    out.push(("pairwise", pairwise_table(eval)));
    out.push(("module_split", module_table(eval)));
    out.push(("feature_family", family_table(eval)));
    out.push(("summary", summary_table(eval)));
    if let Some(p) = pca {
        out.push(("pca", pca_table(p)));
    }
    if let Some(l) = link {
        let mut ts = link_tables(l).into_iter();
        out.push(("asr_elevation", ts.next().expect("two link tables")));
        out.push(("behavior", ts.next().expect("two link tables")));
    }
    if let Some(a) = alignment {
        out.push(("alignment", alignment_table(a)));
    }
    out
}

pub fn render(tables: &[(&str, Table)], notes: &[String]) -> String {
    let mut out = String::new();
    for (_, t) in tables {
        out.push_str(&t.render());
        out.push('\n');
    }
    if !notes.is_empty() {
        out.push_str("Notes\n");
        for n in notes {
            let _ = writeln!(out, "- {n}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let mut t = Table::new("T", &["name", "auc"]);
        t.push(vec!["long comparison".into(), "1.00".into()]);
        t.push(vec!["a".into(), "0.5".into()]);
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "T");
        assert_eq!(lines[1], "name              auc");
        assert_eq!(lines[3], "long comparison  1.00");
        assert_eq!(lines[4], "a                 0.5");
        assert_eq!(t.to_csv(), "name,auc\nlong comparison,1.00\na,0.5\n");
    }
}
