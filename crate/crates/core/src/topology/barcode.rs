//! Barcode rendering: persistence bars as SVG and CSV.
//!
//! Bars are drawn in threshold coordinates, one row per bar, components in
//! red and cycles in blue. Output is fully deterministic: fixed iteration
//! order and fixed-precision coordinates, so renders are golden-file safe.

use super::PersistenceDiagram;

pub const DIM0_COLOR: &str = "#d62728";
pub const DIM1_COLOR: &str = "#1f77b4";

/// One filtration view's diagram plus the thresholds it was computed on.
#[derive(Debug, Clone)]
pub struct BarcodeView {
    pub view_index: usize,
    pub thresholds: Vec<f64>,
    pub diagram: PersistenceDiagram,
}

/// Bars flattened to (dim, birth value, death value) in drawing order:
/// components sorted by (birth, node), then cycles by (birth, edge).
fn view_bars(view: &BarcodeView) -> Vec<(u8, f64, f64)> {
    let t = &view.thresholds;
    let last = *t.last().expect("view with no thresholds");
    let mut d0: Vec<&super::Dim0Bar> = view.diagram.dim0.iter().collect();
    d0.sort_by_key(|b| (b.birth_idx, b.node));
    let mut d1: Vec<&super::Dim1Bar> = view.diagram.dim1.iter().collect();
    d1.sort_by_key(|b| (b.birth_idx, b.edge));
    let mut bars = Vec::with_capacity(d0.len() + d1.len());
    for b in d0 {
        bars.push((0u8, t[b.birth_idx], t[b.death_idx]));
    }
    for b in d1 {
        bars.push((1u8, t[b.birth_idx], last));
    }
    bars
}

/// CSV with a `view,dim,birth,death` header, one row per bar.
pub fn barcode_csv(views: &[BarcodeView]) -> String {
    let mut out = String::from("view,dim,birth,death\n");
    for view in views {
        for (dim, birth, death) in view_bars(view) {
            out.push_str(&format!("{},{},{},{}\n", view.view_index, dim, birth, death));
        }
    }
    out
}

/// Standalone SVG: one horizontal bar per persistence pair, x-axis in
/// threshold units spanning all views.
pub fn barcode_svg(views: &[BarcodeView]) -> String {
    let (x0, x1) = (60.0, 620.0);
    let row_h = 8.0;
    let top = 30.0;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut n_bars = 0usize;
    for view in views {
        lo = lo.min(view.thresholds[0]);
        hi = hi.max(*view.thresholds.last().unwrap());
        n_bars += view.diagram.dim0.len() + view.diagram.dim1.len();
    }
    if !lo.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    let scale = |v: f64| x0 + (v - lo) / span * (x1 - x0);

    let height = top + n_bars as f64 * row_h + views.len() as f64 * 18.0 + 40.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"680\" height=\"{height:.0}\" \
         viewBox=\"0 0 680 {height:.0}\">\n<rect width=\"680\" height=\"{height:.0}\" fill=\"white\"/>\n"
    );

    let mut y = top;
    for view in views {
        svg.push_str(&format!(
            "<text x=\"{x0:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"monospace\">view {}</text>\n",
            y + 4.0,
            view.view_index
        ));
        y += 18.0;
        for (dim, birth, death) in view_bars(view) {
            let xa = scale(birth);
            // A zero-length bar still gets a visible tick.
            let xb = scale(death).max(xa + 1.5);
            let color = if dim == 0 { DIM0_COLOR } else { DIM1_COLOR };
            svg.push_str(&format!(
                "<line x1=\"{xa:.2}\" y1=\"{y:.2}\" x2=\"{xb:.2}\" y2=\"{y:.2}\" \
                 stroke=\"{color}\" stroke-width=\"4\"/>\n"
            ));
            y += row_h;
        }
    }

    let axis_y = y + 12.0;
    svg.push_str(&format!(
        "<line x1=\"{x0:.1}\" y1=\"{axis_y:.1}\" x2=\"{x1:.1}\" y2=\"{axis_y:.1}\" \
         stroke=\"black\" stroke-width=\"1\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{x0:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"monospace\">{lo:.4}</text>\n",
        axis_y + 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"monospace\" \
         text-anchor=\"end\">{hi:.4}</text>\n",
        x1,
        axis_y + 14.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::persistence;

    fn sample_view() -> BarcodeView {
        let thresholds = vec![0.0, 0.5, 1.0];
        let diagram = persistence(&[0.0, 0.0, 1.0, 1.0], &[(0, 1), (1, 2), (2, 3), (3, 0)], &thresholds);
        BarcodeView { view_index: 0, thresholds, diagram }
    }

    #[test]
    fn csv_lists_every_bar_with_header() {
        let csv = barcode_csv(&[sample_view()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "view,dim,birth,death");
        // 4 nodes plus 1 cycle.
        assert_eq!(lines.len(), 6);
        assert!(lines[1..5].iter().all(|l| l.starts_with("0,0,")));
        assert_eq!(lines[5], "0,1,1,1");
    }

    #[test]
    fn csv_keeps_the_interval_multiset() {
        let view = sample_view();
        let csv = barcode_csv(&[view]);
        let mut from_csv: Vec<(f64, f64)> = csv
            .lines()
            .skip(1)
            .filter(|l| l.starts_with("0,0,"))
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[2].parse().unwrap(), f[3].parse().unwrap())
            })
            .collect();
        from_csv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let view = sample_view();
        let mut expect: Vec<(f64, f64)> = view
            .diagram
            .dim0
            .iter()
            .map(|b| (view.thresholds[b.birth_idx], view.thresholds[b.death_idx]))
            .collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(from_csv, expect);
    }

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let a = barcode_svg(&[sample_view()]);
        let b = barcode_svg(&[sample_view()]);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches(DIM0_COLOR).count(), 4);
        assert_eq!(a.matches(DIM1_COLOR).count(), 1);
    }
}
