//! Orthographic stick-figure plots written as SVG.

use std::fmt::Write as _;

use crate::error::{structural, Result};
use crate::motion::{Matrix, Skeleton};

const PANEL: f64 = 120.0;
const MARGIN: f64 = 10.0;

/// One panel per frame, frames left to right, projected onto the x-y plane.
/// A shared scale keeps panels comparable.
pub fn sequence_svg(frames: &Matrix, skeleton: &Skeleton) -> Result<String> {
    if frames.cols() != skeleton.dim() || frames.rows() == 0 {
        return Err(structural!("frames do not match the skeleton"));
    }
    let n = frames.rows();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for row in frames.iter_rows() {
        let root = [row[3 * skeleton.root_index()], row[3 * skeleton.root_index() + 1]];
        for j in 0..skeleton.joint_count() {
            for a in 0..2 {
                let v = row[3 * j + a] - if a == 0 { root[0] } else { 0.0 };
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (PANEL - 2.0 * MARGIN) / extent;
    let width = PANEL * n as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" viewBox="0 0 {width} {PANEL}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{PANEL}" fill="white"/>"#);
    for (f, row) in frames.iter_rows().enumerate() {
        let ox = f as f64 * PANEL;
        let rx = row[3 * skeleton.root_index()];
        let px = |j: usize| ox + MARGIN + (row[3 * j] - rx - lo[0]) * scale;
        let py = |j: usize| PANEL - MARGIN - (row[3 * j + 1] - lo[1]) * scale;
        let _ = writeln!(s, r#"<g stroke="black" stroke-width="2" stroke-linecap="round">"#);
        for j in 0..skeleton.joint_count() {
            if let Some(p) = skeleton.parent(j) {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                    px(p),
                    py(p),
                    px(j),
                    py(j)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
