//! SVG heatmaps of connectivity matrices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::rescale01;

const CELL: usize = 40;
const MARGIN: usize = 60;
const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

fn color(v: f64) -> String {
    let c: Vec<u8> = (0..3).map(|i| (LOW[i] + (HIGH[i] - LOW[i]) * v).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Renders an `n x n` matrix (rows are targets, columns sources). Off-diagonal
/// values are rescaled to 0..1 on a white-to-blue ramp; the diagonal is
/// drawn grey.
pub fn heatmap_svg(n: usize, values: &[f64], labels: Option<&[String]>, title: &str) -> Result<String> {
    if n < 2 || values.len() != n * n {
        return Err(Error::Shape {
            op: "heatmap",
            lhs: vec![n, n],
            rhs: vec![values.len()],
        });
    }
    let off: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|(i, _)| i / n != i % n)
        .map(|(_, v)| *v)
        .collect();
    let scaled = rescale01(&off).unwrap_or_else(|_| vec![0.0; off.len()]);
    let name = |i: usize| match labels {
        Some(l) if l.len() == n => l[i].clone(),
        _ => i.to_string(),
    };
    let side = 2 * MARGIN + n * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        side / 2,
        escape(title)
    );
    let mut k = 0;
    for target in 0..n {
        for source in 0..n {
            let (x, y) = (MARGIN + source * CELL, MARGIN + target * CELL);
            let fill = if target == source {
                "#bdbdbd".to_string()
            } else {
                k += 1;
                color(scaled[k - 1])
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}"><title>{} &lt;- {}: {}</title></rect>"#,
                escape(&name(target)),
                escape(&name(source)),
                values[target * n + source]
            );
        }
    }
    for i in 0..n {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN - 6,
            escape(&name(i))
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 6,
            c + 4,
            escape(&name(i))
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_and_mask() {
        let m = [0.0, 1.0, 2.0, 3.0, 99.0, 5.0, 6.0, 7.0, -4.0];
        let svg = heatmap_svg(3, &m, None, "EC <t=3>").unwrap();
        assert_eq!(svg.matches("<rect").count(), 9);
        assert_eq!(svg.matches("#bdbdbd").count(), 3);
        // Smallest off-diagonal value maps to white, largest to the dark end.
        assert!(svg.contains(r##"fill="#ffffff"><title>0 &lt;- 1"##));
        assert!(svg.contains(r##"fill="#08306b"><title>2 &lt;- 1"##));
        assert!(svg.contains("EC &lt;t=3&gt;"));
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(heatmap_svg(3, &[0.0; 8], None, "").is_err());
    }
}
