//! Experiment report: per (condition, fold, class) Dice cells, paired-test
//! rows, CSV round-trip and a static SVG bar chart.

use std::path::Path;

use crate::error::{Error, Result};

pub const DICE_CSV: &str = "report_dice.csv";
pub const WILCOXON_CSV: &str = "report_wilcoxon.csv";
pub const CHART_SVG: &str = "report_chart.svg";

/// One (condition, fold, class) cell. `dice_mean = None` marks a cell whose
/// stage failed or that had no test records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub condition: String,
    pub fold: usize,
    pub class: usize,
    pub n_test: usize,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonRow {
    pub condition: String,
    pub class: usize,
    pub w: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub pairing: String,
    pub cells: Vec<ReportCell>,
    pub wilcoxon: Vec<WilcoxonRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format(format!("bad float `{s}` in report")))
}

impl ExperimentReport {
    fn header_line(&self) -> String {
        format!("# fingerprint={} pairing={}", self.fingerprint, self.pairing)
    }

    pub fn dice_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header_line());
        out.push('\n');
        out.push_str("condition,fold,global_class,n_test,dice_mean,dice_std\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.condition,
                c.fold,
                c.class,
                c.n_test,
                fmt_opt(c.dice_mean),
                fmt_opt(c.dice_std)
            ));
        }
        out
    }

    pub fn wilcoxon_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header_line());
        out.push('\n');
        out.push_str("condition,global_class,wilcoxon_W,p_two_sided\n");
        for r in &self.wilcoxon {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.condition, r.class, r.w, r.p
            ));
        }
        out
    }

    pub fn from_csv(dice: &str, wilcoxon: &str) -> Result<ExperimentReport> {
        let mut report = ExperimentReport::default();
        for (i, line) in dice.lines().enumerate() {
            if line.starts_with('#') {
                for token in line.trim_start_matches('#').split_whitespace() {
                    if let Some(v) = token.strip_prefix("fingerprint=") {
                        report.fingerprint = v.to_string();
                    }
                    if let Some(v) = token.strip_prefix("pairing=") {
                        report.pairing = v.to_string();
                    }
                }
                continue;
            }
            if line.starts_with("condition,") || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format(format!("dice csv line {}: bad field count", i + 1)));
            }
            report.cells.push(ReportCell {
                condition: f[0].to_string(),
                fold: f[1].parse().map_err(|_| Error::format("bad fold"))?,
                class: f[2].parse().map_err(|_| Error::format("bad class"))?,
                n_test: f[3].parse().map_err(|_| Error::format("bad n_test"))?,
                dice_mean: parse_opt(f[4])?,
                dice_std: parse_opt(f[5])?,
            });
        }
        for (i, line) in wilcoxon.lines().enumerate() {
            if line.starts_with('#') || line.starts_with("condition,") || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(format!(
                    "wilcoxon csv line {}: bad field count",
                    i + 1
                )));
            }
            report.wilcoxon.push(WilcoxonRow {
                condition: f[0].to_string(),
                class: f[1].parse().map_err(|_| Error::format("bad class"))?,
                w: f[2].parse().map_err(|_| Error::format("bad W"))?,
                p: f[3].parse().map_err(|_| Error::format("bad p"))?,
            });
        }
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(DICE_CSV), self.dice_csv())?;
        std::fs::write(dir.join(WILCOXON_CSV), self.wilcoxon_csv())?;
        std::fs::write(dir.join(CHART_SVG), self.svg_chart())?;
        Ok(())
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.condition) {
                out.push(c.condition.clone());
            }
        }
        out
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.class) {
                out.push(c.class);
            }
        }
        out.sort_unstable();
        out
    }

    /// Mean Dice pooled over folds for one (condition, class) pair.
    pub fn pooled_mean(&self, condition: &str, class: usize) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for c in &self.cells {
            if c.condition == condition && c.class == class {
                if let Some(m) = c.dice_mean {
                    num += m * c.n_test as f64;
                    den += c.n_test;
                }
            }
        }
        if den == 0 {
            None
        } else {
            Some(num / den as f64)
        }
    }

    /// Static grouped bar chart: one group per global class, one bar per
    /// condition, pooled mean Dice as bar height.
    pub fn svg_chart(&self) -> String {
        const PALETTE: [&str; 6] = [
            "#9e9e9e", "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
        ];
        let conditions = self.conditions();
        let classes = self.classes();
        let bar_w = 34.0;
        let group_w = conditions.len() as f64 * bar_w + 40.0;
        let (left, top, plot_h) = (60.0, 30.0, 260.0);
        let width = left + classes.len() as f64 * group_w + 40.0;
        let height = top + plot_h + 90.0;
        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        s.push_str(&format!(
            "<text x=\"{left}\" y=\"18\">mean Dice per global class ({})</text>\n",
            self.fingerprint
        ));
        // y axis + gridlines
        for i in 0..=4 {
            let v = i as f64 * 0.25;
            let y = top + plot_h * (1.0 - v);
            s.push_str(&format!(
                "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
                width - 20.0
            ));
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
                left - 6.0,
                y + 4.0
            ));
        }
        for (gi, class) in classes.iter().enumerate() {
            let gx = left + gi as f64 * group_w + 20.0;
            for (ci, cond) in conditions.iter().enumerate() {
                let x = gx + ci as f64 * bar_w;
                if let Some(m) = self.pooled_mean(cond, *class) {
                    let h = plot_h * m.clamp(0.0, 1.0);
                    let y = top + plot_h - h;
                    s.push_str(&format!(
                        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\" class=\"bar\"/>\n",
                        bar_w - 4.0,
                        PALETTE[ci % PALETTE.len()]
                    ));
                    s.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{m:.3}</text>\n",
                        x + bar_w / 2.0 - 2.0,
                        y - 3.0
                    ));
                }
            }
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">class {class}</text>\n",
                gx + (conditions.len() as f64 * bar_w) / 2.0,
                top + plot_h + 18.0
            ));
        }
        // legend
        for (ci, cond) in conditions.iter().enumerate() {
            let y = top + plot_h + 40.0 + ci as f64 * 16.0;
            s.push_str(&format!(
                "<rect x=\"{left}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
                y - 10.0,
                PALETTE[ci % PALETTE.len()]
            ));
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{y:.1}\">{cond}</text>\n",
                left + 18.0
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}
