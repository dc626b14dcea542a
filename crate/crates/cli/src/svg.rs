//! Minimal standalone SVG scatter plot of projected latents.

use std::fmt::Write;

use shapeprior::voxel::Group;

pub(crate) struct ScatterPoint {
    pub group: Group,
    pub test: bool,
    pub xy: [f64; 2],
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

fn color(g: Group) -> &'static str {
    match g {
        Group::Young => "#1f77b4",
        Group::OldNonsarcopenic => "#2ca02c",
        Group::SyntheticNormal => "#17becf",
        Group::Sarcopenic | Group::SyntheticAnomalous => "#d62728",
        Group::Unlabeled => "#7f7f7f",
    }
}

/// Training points are filled circles, test points hollow squares.
pub(crate) fn lda_scatter(points: &[ScatterPoint]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p.xy[k]);
            hi[k] = hi[k].max(p.xy[k]);
        }
    }
    let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - lo[0]) / span(0) * inner;
    let py = |y: f64| SIZE - MARGIN - (y - lo[1]) / span(1) * inner;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="#999"/>"##
    );
    for p in points.iter().filter(|p| p.xy.iter().all(|v| v.is_finite())) {
        let (x, y) = (px(p.xy[0]), py(p.xy[1]));
        if p.test {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="none" stroke="{}" stroke-width="1.5"><title>{} test</title></rect>"#,
                x - 3.5,
                y - 3.5,
                color(p.group),
                p.group
            );
        } else {
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{}" fill-opacity="0.7"><title>{} train</title></circle>"#,
                color(p.group),
                p.group
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">LD1</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">axis 2</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}
