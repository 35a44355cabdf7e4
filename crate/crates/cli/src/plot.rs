//! Minimal hand-rolled SVG output for sweep results: a heat grid when
//! both axes have several values, a line chart otherwise. Verification
//! aid, not a publication figure.

use subspace_lab::trainer::{SweepCell, SweepGrid};

pub fn sweep_svg(grid: &SweepGrid, cells: &[SweepCell]) -> String {
    let (n1, n2) = grid.axis_names();
    let mut axis1: Vec<f64> = cells.iter().map(|c| c.values.0).collect();
    let mut axis2: Vec<f64> = cells.iter().map(|c| c.values.1).collect();
    axis1.dedup();
    axis2.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    axis2.dedup();
    let mut axis1_sorted = axis1.clone();
    axis1_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    axis1_sorted.dedup();

    if axis1_sorted.len() > 1 && axis2.len() > 1 {
        heatmap(n1, n2, &axis1_sorted, &axis2, cells)
    } else {
        lines(n1, n2, &axis1_sorted, &axis2, cells)
    }
}

fn cell_acc(cells: &[SweepCell], v1: f64, v2: f64) -> Option<f64> {
    cells
        .iter()
        .find(|c| c.values.0 == v1 && c.values.1 == v2)
        .and_then(|c| c.acc)
}

fn color(acc: f64) -> String {
    // dark blue (0.0) to warm yellow (1.0)
    let t = acc.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u8;
    let g = (45.0 + 180.0 * t) as u8;
    let b = (110.0 - 60.0 * t) as u8;
    format!("rgb({r},{g},{b})")
}

fn heatmap(n1: &str, n2: &str, axis1: &[f64], axis2: &[f64], cells: &[SweepCell]) -> String {
    let cw = 90.0;
    let ch = 46.0;
    let left = 110.0;
    let top = 50.0;
    let width = left + cw * axis2.len() as f64 + 30.0;
    let height = top + ch * axis1.len() as f64 + 60.0;
    let mut s = svg_open(width, height);
    s += &text(left, 24.0, 15, &format!("accuracy over {n1} x {n2}"));
    for (i, &v1) in axis1.iter().enumerate() {
        let y = top + ch * i as f64;
        s += &text(8.0, y + ch / 2.0 + 4.0, 12, &format!("{n1}={v1}"));
        for (j, &v2) in axis2.iter().enumerate() {
            let x = left + cw * j as f64;
            match cell_acc(cells, v1, v2) {
                Some(a) => {
                    s += &format!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\" stroke=\"white\"/>\n",
                        color(a)
                    );
                    s += &text(x + 8.0, y + ch / 2.0 + 4.0, 12, &format!("{a:.3}"));
                }
                None => {
                    s += &format!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"#888\" stroke=\"white\"/>\n"
                    );
                    s += &text(x + 8.0, y + ch / 2.0 + 4.0, 12, "failed");
                }
            }
        }
    }
    for (j, &v2) in axis2.iter().enumerate() {
        let x = left + cw * j as f64;
        s += &text(
            x + 6.0,
            top + ch * axis1.len() as f64 + 22.0,
            12,
            &format!("{n2}={v2}"),
        );
    }
    s += "</svg>\n";
    s
}

fn lines(n1: &str, n2: &str, axis1: &[f64], axis2: &[f64], cells: &[SweepCell]) -> String {
    let left = 60.0;
    let top = 40.0;
    let pw = 420.0;
    let ph = 220.0;
    let width = left + pw + 160.0;
    let height = top + ph + 60.0;
    let mut s = svg_open(width, height);
    s += &text(left, 22.0, 15, &format!("accuracy vs {n2} (one line per {n1})"));
    // axes
    s += &format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + ph,
        left + pw,
        top + ph
    );
    s += &format!("<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n", top + ph);
    for tick in [0.0, 0.5, 1.0] {
        let y = top + ph * (1.0 - tick);
        s += &text(18.0, y + 4.0, 11, &format!("{tick:.1}"));
        s += &format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{left}\" y2=\"{y}\" stroke=\"black\"/>\n",
            left - 5.0
        );
    }
    let xs = |j: usize| -> f64 {
        if axis2.len() == 1 {
            left + pw / 2.0
        } else {
            left + pw * j as f64 / (axis2.len() - 1) as f64
        }
    };
    for (j, &v2) in axis2.iter().enumerate() {
        s += &text(xs(j) - 14.0, top + ph + 20.0, 11, &format!("{v2}"));
    }
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, &v1) in axis1.iter().enumerate() {
        let stroke = palette[i % palette.len()];
        let mut points = Vec::new();
        for (j, &v2) in axis2.iter().enumerate() {
            if let Some(a) = cell_acc(cells, v1, v2) {
                points.push(format!("{},{}", xs(j), top + ph * (1.0 - a.clamp(0.0, 1.0))));
            }
        }
        if !points.is_empty() {
            s += &format!(
                "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"2\" points=\"{}\"/>\n",
                points.join(" ")
            );
        }
        s += &format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{stroke}\">{n1}={v1}</text>\n",
            left + pw + 12.0,
            top + 16.0 * (i as f64 + 1.0)
        );
    }
    s += "</svg>\n";
    s
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn text(x: f64, y: f64, size: u32, content: &str) -> String {
    format!("<text x=\"{x}\" y=\"{y}\" font-size=\"{size}\">{content}</text>\n")
}
