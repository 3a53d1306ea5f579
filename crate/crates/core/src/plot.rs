//! Static plot data: InD vs OOD histograms of neuron-state forms and of
//! fused scores, rendered as CSV and minimal SVG 1.1.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::ActivationDump;
use crate::error::{NacError, Result};
use crate::state::sigmoid_state;

/// Which per-neuron quantity to plot. All are squashed by `σ(α·x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateForm {
    Raw,
    Gradient,
    Product,
}

impl StateForm {
    pub const ALL: [StateForm; 3] = [StateForm::Raw, StateForm::Gradient, StateForm::Product];

    pub fn name(self) -> &'static str {
        match self {
            StateForm::Raw => "z",
            StateForm::Gradient => "grad",
            StateForm::Product => "z_times_grad",
        }
    }
}

/// Squashed values of one neuron over every row of `dump`.
pub fn form_values(
    dump: &ActivationDump,
    neuron: usize,
    form: StateForm,
    alpha: f64,
) -> Result<Vec<f64>> {
    if neuron >= dump.neurons {
        return Err(NacError::UnknownNeuron {
            neuron,
            neurons: dump.neurons,
        });
    }
    let n = dump.neurons;
    Ok((0..dump.rows)
        .map(|r| {
            let z = dump.z[r * n + neuron] as f64;
            let g = dump.grad[r * n + neuron] as f64;
            let x = match form {
                StateForm::Raw => z,
                StateForm::Gradient => g,
                StateForm::Product => z * g,
            };
            sigmoid_state(alpha, x)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub counts: Vec<u64>,
}

impl Series {
    fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of this series' samples in each bin.
    pub fn density(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Histogram of several series over shared bin edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub title: String,
    pub edges: Vec<f64>,
    pub series: Vec<Series>,
}

fn count_into(edges: &[f64], values: &[f64]) -> Vec<u64> {
    let m = edges.len() - 1;
    let mut counts = vec![0u64; m];
    for &v in values {
        if !v.is_finite() || v < edges[0] || v > edges[m] {
            continue;
        }
        let k = edges[1..m].partition_point(|&e| e <= v);
        counts[k] += 1;
    }
    counts
}

impl Histogram {
    pub fn new(
        title: impl Into<String>,
        edges: Vec<f64>,
        series: &[(&str, &[f64])],
    ) -> Result<Self> {
        if edges.len() < 2
            || edges
                .windows(2)
                .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
        {
            return Err(NacError::InvalidArgument(
                "histogram edges must be strictly increasing with at least one bin".into(),
            ));
        }
        let series = series
            .iter()
            .map(|(label, values)| Series {
                label: (*label).to_string(),
                counts: count_into(&edges, values),
            })
            .collect();
        Ok(Self {
            title: title.into(),
            edges,
            series,
        })
    }

    /// Uniform bins over `[lo, hi]`.
    pub fn uniform(
        title: impl Into<String>,
        lo: f64,
        hi: f64,
        bins: usize,
        series: &[(&str, &[f64])],
    ) -> Result<Self> {
        if bins == 0
            || lo.partial_cmp(&hi) != Some(Ordering::Less)
            || !lo.is_finite()
            || !hi.is_finite()
        {
            return Err(NacError::InvalidArgument(format!(
                "bad histogram range [{lo}, {hi}] with {bins} bins"
            )));
        }
        let edges = (0..=bins)
            .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
            .collect();
        Self::new(title, edges, series)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi");
        for s in &self.series {
            let _ = write!(out, ",{0}_count,{0}_density", s.label);
        }
        out.push('\n');
        let dens: Vec<Vec<f64>> = self.series.iter().map(Series::density).collect();
        for k in 0..self.edges.len() - 1 {
            let _ = write!(out, "{:.6},{:.6}", self.edges[k], self.edges[k + 1]);
            for (s, d) in self.series.iter().zip(&dens) {
                let _ = write!(out, ",{},{:.6}", s.counts[k], d[k]);
            }
            out.push('\n');
        }
        out
    }

    /// Overlaid bar chart of per-series densities.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 48.0;
        const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let dens: Vec<Vec<f64>> = self.series.iter().map(Series::density).collect();
        let ymax = dens
            .iter()
            .flatten()
            .copied()
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let (lo, hi) = (
            self.edges[0],
            *self.edges.last().expect("at least two edges"),
        );
        let x = |v: f64| PAD + (v - lo) / (hi - lo) * (W - 2.0 * PAD);
        let y = |v: f64| H - PAD - v / ymax * (H - 2.0 * PAD);

        let mut out = String::new();
        let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        for (i, d) in dens.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.5">"#);
            for (k, &v) in d.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let (x0, x1) = (x(self.edges[k]), x(self.edges[k + 1]));
                let _ = writeln!(
                    out,
                    r#"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                    y(v),
                    (x1 - x0).max(0.5),
                    H - PAD - y(v)
                );
            }
            out.push_str("</g>\n");
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
                W - PAD - 100.0,
                PAD + 16.0 * i as f64,
                escape(&self.series[i].label)
            );
        }
        let _ = writeln!(
            out,
            r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
            H - PAD,
            W - PAD
        );
        for (v, anchor) in [(lo, "start"), (hi, "end")] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
                x(v),
                H - PAD + 16.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            PAD - 4.0,
            PAD + 4.0,
            fmt_tick(ymax)
        );
        out.push_str("</svg>\n");
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// InD vs OOD histograms of one neuron for each state form.
pub fn state_histograms(
    ind: &ActivationDump,
    ood: &ActivationDump,
    neuron: usize,
    alpha: f64,
    bins: usize,
) -> Result<Vec<(StateForm, Histogram)>> {
    if ind.neurons != ood.neurons {
        return Err(NacError::Incompatible(format!(
            "InD dump has {} neurons, OOD dump has {}",
            ind.neurons, ood.neurons
        )));
    }
    StateForm::ALL
        .iter()
        .map(|&form| {
            let a = form_values(ind, neuron, form, alpha)?;
            let b = form_values(ood, neuron, form, alpha)?;
            let title = format!(
                "{} neuron {neuron}: sigmoid({alpha}·{})",
                ind.layer_id,
                form.name()
            );
            Ok((
                form,
                Histogram::uniform(title, 0.0, 1.0, bins, &[("ind", &a), ("ood", &b)])?,
            ))
        })
        .collect()
}

/// InD vs OOD histogram of fused scores over their joint range.
pub fn score_histogram(ind: &[f64], ood: &[f64], bins: usize) -> Result<Histogram> {
    let all = ind.iter().chain(ood).copied();
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return Err(NacError::InvalidArgument("no finite scores to plot".into()));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Histogram::uniform(
        "fused NAC-UE score",
        lo,
        hi,
        bins,
        &[("ind", ind), ("ood", ood)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump() -> ActivationDump {
        ActivationDump {
            layer_id: "layer0".into(),
            neurons: 2,
            rows: 2,
            classes: 2,
            z: vec![0.0, 1.0, 2.0, 0.5],
            grad: vec![0.1, -0.2, 0.0, 0.3],
            labels: vec![0, 1],
            logits: vec![0.0, 0.0, 1.0, 0.0],
        }
    }

    #[test]
    fn neuron_out_of_range() {
        let err = form_values(&dump(), 2, StateForm::Raw, 1.0).unwrap_err();
        assert!(matches!(
            err,
            NacError::UnknownNeuron {
                neuron: 2,
                neurons: 2
            }
        ));
    }

    #[test]
    fn forms_squash() {
        let d = dump();
        let v = form_values(&d, 1, StateForm::Product, 1.0).unwrap();
        assert!((v[0] - sigmoid_state(1.0, -0.2)).abs() < 1e-7);
        assert!((v[1] - sigmoid_state(1.0, 0.15)).abs() < 1e-7);
    }

    #[test]
    fn counts_and_closed_last_bin() {
        let h = Histogram::uniform("t", 0.0, 1.0, 2, &[("a", &[0.0, 0.5, 1.0, 1.5])]).unwrap();
        assert_eq!(h.series[0].counts, vec![1, 2]);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,a_count,a_density\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn title_is_escaped() {
        let h = Histogram::uniform("a<b & c", 0.0, 1.0, 4, &[("x", &[0.2])]).unwrap();
        assert!(h.to_svg().contains("a&lt;b &amp; c"));
    }
}
