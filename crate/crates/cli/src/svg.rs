//! SVG 1.1 figures: landmark strings with covariance ellipses, image
//! snapshot montages and the template-estimate overlay.

use std::fmt::Write as _;

use stochmatch_core::image::ImageField;
use stochmatch_core::landmark::{LandmarkConfig, Trajectory};
use stochmatch_core::{Mat2, Vec2};

const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;

/// Below this trace a covariance is treated as zero and gets no ellipse.
const MIN_TRACE: f64 = 1e-14;

/// Maps data coordinates (y up) into the square canvas (y down).
struct Frame {
    lo: Vec2,
    scale: f64,
}

impl Frame {
    fn fit<'a>(points: impl IntoIterator<Item = &'a Vec2>) -> Self {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if !lo.x.is_finite() {
            lo = Vec2::zeros();
            hi = Vec2::repeat(1.0);
        }
        let extent = (hi - lo).max().max(1e-9);
        Self {
            lo: lo - Vec2::repeat(0.05 * extent),
            scale: (SIZE - 2.0 * MARGIN) / (1.1 * extent),
        }
    }

    fn map(&self, p: Vec2) -> (f64, f64) {
        let d = (p - self.lo) * self.scale;
        (MARGIN + d.x, SIZE - MARGIN - d.y)
    }
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn polyline(out: &mut String, frame: &Frame, pts: impl Iterator<Item = Vec2>, style: &str) {
    let coords: Vec<String> = pts
        .map(|p| {
            let (x, y) = frame.map(p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
}

fn dots(out: &mut String, frame: &Frame, pts: &[Vec2], r: f64, fill: &str) {
    for p in pts {
        let (x, y) = frame.map(*p);
        let _ = writeln!(out, r#"<circle cx="{x:.3}" cy="{y:.3}" r="{r}" fill="{fill}"/>"#);
    }
}

/// Semi-axes and angle (radians, data frame) of the 2-sigma ellipse.
pub fn two_sigma_ellipse(cov: &Mat2) -> Option<(f64, f64, f64)> {
    let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    if !(a + c > MIN_TRACE) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid + rad, (mid - rad).max(0.0));
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    Some((2.0 * l1.sqrt(), 2.0 * l2.sqrt(), angle))
}

pub struct StringsFigure<'a> {
    pub source: &'a LandmarkConfig,
    pub target: &'a LandmarkConfig,
    /// Sampled strings, drawn faintly.
    pub strings: &'a [Trajectory],
    pub mean: Option<&'a Trajectory>,
    /// Endpoint means and covariances for the ellipses.
    pub endpoint_moments: Option<(&'a [Vec2], &'a [Mat2])>,
}

pub fn strings_svg(fig: &StringsFigure) -> String {
    let mut all: Vec<Vec2> = fig.source.points().to_vec();
    all.extend_from_slice(fig.target.points());
    for s in fig.strings.iter().chain(fig.mean) {
        all.extend_from_slice(s.data());
    }
    let frame = Frame::fit(&all);
    let mut out = String::new();
    header(&mut out, SIZE, SIZE);
    let shown = fig.strings.len().min(200);
    for s in &fig.strings[fig.strings.len() - shown..] {
        for i in 0..s.n_landmarks() {
            polyline(
                &mut out,
                &frame,
                (0..s.n_t()).map(|k| s.at(k, i)),
                r##"stroke="#7a9cc6" stroke-opacity="0.25" stroke-width="0.8""##,
            );
        }
    }
    if let Some(m) = fig.mean {
        for i in 0..m.n_landmarks() {
            polyline(&mut out, &frame, (0..m.n_t()).map(|k| m.at(k, i)), r##"stroke="#1d3557" stroke-width="1.6""##);
        }
    }
    if let Some((means, covs)) = fig.endpoint_moments {
        for (m, c) in means.iter().zip(covs) {
            if let Some((rx, ry, angle)) = two_sigma_ellipse(c) {
                let (x, y) = frame.map(*m);
                let _ = writeln!(
                    out,
                    r##"<ellipse cx="{x:.3}" cy="{y:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {x:.3} {y:.3})" fill="none" stroke="#e76f51" stroke-width="1.2"/>"##,
                    rx * frame.scale,
                    ry * frame.scale,
                    -angle.to_degrees()
                );
            }
        }
    }
    let close = |c: &LandmarkConfig| c.points().iter().chain(c.points().first()).copied().collect::<Vec<_>>();
    polyline(&mut out, &frame, close(fig.source).into_iter(), r##"stroke="#2a9d8f" stroke-width="1.2""##);
    polyline(&mut out, &frame, close(fig.target).into_iter(), r##"stroke="#e63946" stroke-width="1.2""##);
    dots(&mut out, &frame, fig.source.points(), 3.0, "#2a9d8f");
    dots(&mut out, &frame, fig.target.points(), 3.0, "#e63946");
    out.push_str("</svg>\n");
    out
}

/// Image snapshots side by side, each labelled with its time.
pub fn montage_svg(frames: &[(f64, ImageField)]) -> String {
    let cell = 2.0;
    let gap = 10.0;
    let (nx, ny) = frames.first().map(|f| (f.1.nx(), f.1.ny())).unwrap_or((1, 1));
    let w = frames.len() as f64 * (nx as f64 * cell + gap) + gap;
    let h = ny as f64 * cell + 2.0 * gap + 14.0;
    let mut out = String::new();
    header(&mut out, w, h);
    for (n, (t, img)) in frames.iter().enumerate() {
        let (lo, hi) = img.min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x0 = gap + n as f64 * (nx as f64 * cell + gap);
        let _ = writeln!(out, r#"<g transform="translate({x0} {gap})">"#);
        for j in 0..img.ny() {
            // runs of equal grey merge into one rect
            let mut i = 0;
            while i < img.nx() {
                let g = (((img.get(i, j) - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                let mut len = 1;
                while i + len < img.nx()
                    && (((img.get(i + len, j) - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8 == g
                {
                    len += 1;
                }
                if g > 0 {
                    let _ = writeln!(
                        out,
                        r#"<rect x="{}" y="{}" width="{}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                        i as f64 * cell,
                        j as f64 * cell,
                        len as f64 * cell
                    );
                }
                i += len;
            }
        }
        let _ = writeln!(
            out,
            r#"<rect width="{}" height="{}" fill="none" stroke="gray"/>"#,
            nx as f64 * cell,
            ny as f64 * cell
        );
        let _ = writeln!(
            out,
            r#"<text x="0" y="{}" font-family="sans-serif" font-size="12">t = {t:.2}</text></g>"#,
            ny as f64 * cell + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Observations in grey, template iterates from light to dark, final
/// template on top.
pub fn mean_evolution_svg(observations: &[LandmarkConfig], templates: &[LandmarkConfig]) -> String {
    let all: Vec<Vec2> = observations
        .iter()
        .chain(templates)
        .flat_map(|c| c.points().iter().copied())
        .collect();
    let frame = Frame::fit(&all);
    let mut out = String::new();
    header(&mut out, SIZE, SIZE);
    for o in observations {
        dots(&mut out, &frame, o.points(), 1.5, "#9a9a9a");
    }
    let n = templates.len().max(2) - 1;
    for (k, t) in templates.iter().enumerate() {
        let shade = 200 - (170 * k / n) as u32;
        let closed = t.points().iter().chain(t.points().first()).copied();
        polyline(
            &mut out,
            &frame,
            closed,
            &format!(r#"stroke="rgb({shade},{shade},255)" stroke-width="1""#),
        );
    }
    if let Some(last) = templates.last() {
        dots(&mut out, &frame, last.points(), 3.0, "#1d3557");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_axes() {
        let (rx, ry, a) = two_sigma_ellipse(&Mat2::new(4.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!((rx, ry, a), (4.0, 2.0, 0.0));
        let (rx, ry, a) = two_sigma_ellipse(&Mat2::new(1.0, 0.0, 0.0, 9.0)).unwrap();
        assert_eq!((rx, ry), (6.0, 2.0));
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(two_sigma_ellipse(&Mat2::zeros()).is_none());
    }

    #[test]
    fn frame_flips_y() {
        let f = Frame::fit(&[Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)]);
        let (_, y0) = f.map(Vec2::new(0.0, 0.0));
        let (_, y1) = f.map(Vec2::new(0.0, 1.0));
        assert!(y1 < y0);
    }
}
