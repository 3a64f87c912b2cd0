//! Standalone SVG plots: scatter, quiver, trajectories and density
//! contours. Coordinates are printed with fixed precision, so identical
//! inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use vdm_core::Error as CoreError;

use crate::error::{self, Result};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Data-space window mapped onto a square canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub size: f64,
    pub margin: f64,
}

impl Frame {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Frame {
            xmin,
            xmax,
            ymin,
            ymax,
            size: 480.0,
            margin: 32.0,
        }
    }

    pub fn square(half_width: f64) -> Self {
        Frame::new(-half_width, half_width, -half_width, half_width)
    }

    /// Smallest symmetric square around the origin containing `points`,
    /// padded by 10%.
    pub fn fit(points: &[Vec<f64>]) -> Self {
        let m = points
            .iter()
            .flat_map(|p| p.iter().map(|v| v.abs()))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        Frame::square(if m > 0.0 { 1.1 * m } else { 3.0 })
    }

    fn inner(&self) -> f64 {
        self.size - 2.0 * self.margin
    }

    pub fn to_screen(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = self.margin + (x - self.xmin) / (self.xmax - self.xmin) * self.inner();
        let sy = self.margin + (self.ymax - y) / (self.ymax - self.ymin) * self.inner();
        (sx, sy)
    }

    pub fn from_screen(&self, sx: f64, sy: f64) -> (f64, f64) {
        let x = self.xmin + (sx - self.margin) / self.inner() * (self.xmax - self.xmin);
        let y = self.ymax - (sy - self.margin) / self.inner() * (self.ymax - self.ymin);
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrow {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Values of a scalar function on a regular grid, `values[j][i]` at
/// `(xs[i], ys[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Grid {
    pub fn sample(frame: &Frame, n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let lin = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect() };
        let xs = lin(frame.xmin, frame.xmax);
        let ys = lin(frame.ymin, frame.ymax);
        let values = ys.iter().map(|&y| xs.iter().map(|&x| f(x, y)).collect()).collect();
        Grid { xs, ys, values }
    }

    fn max(&self) -> f64 {
        self.values.iter().flatten().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Scatter { points: Vec<Vec<f64>>, labels: Option<Vec<usize>> },
    Quiver { arrows: Vec<Arrow> },
    Trajectories { paths: Vec<Vec<Vec<f64>>> },
    /// Iso-lines at the given fractions of the grid maximum.
    DensityContour { grid: Grid, fractions: Vec<f64> },
}

fn check_2d(points: &[Vec<f64>]) -> Result<()> {
    if let Some(p) = points.iter().find(|p| p.len() != 2) {
        return Err(CoreError::Contract(format!("SVG plots need 2-D points, got dimension {}", p.len())).into());
    }
    Ok(())
}

/// Arrows of `field` on an `n × n` grid, scaled so the longest spans 90%
/// of a cell.
pub fn quiver_arrows(frame: &Frame, n: usize, field: impl Fn(f64, f64) -> [f64; 2]) -> Vec<Arrow> {
    let cell = (frame.xmax - frame.xmin) / n as f64;
    let mut raw = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = frame.xmin + (i as f64 + 0.5) * cell;
            let y = frame.ymin + (j as f64 + 0.5) * (frame.ymax - frame.ymin) / n as f64;
            let s = field(x, y);
            raw.push((x, y, s));
        }
    }
    let longest = raw
        .iter()
        .map(|(_, _, s)| s[0].hypot(s[1]))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let k = if longest > 0.0 { 0.9 * cell / longest } else { 0.0 };
    raw.into_iter()
        .map(|(x, y, s)| {
            // Lengths follow the square root of the magnitude so weak
            // regions remain visible.
            let m = s[0].hypot(s[1]);
            let scale = if m > 0.0 && m.is_finite() { k * (m * longest).sqrt() / m } else { 0.0 };
            Arrow {
                x,
                y,
                dx: s[0] * scale,
                dy: s[1] * scale,
            }
        })
        .collect()
}

fn f2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn axes(out: &mut String, frame: &Frame) {
    let (x0, y0) = frame.to_screen(frame.xmin, frame.ymin);
    let (x1, y1) = frame.to_screen(frame.xmax, frame.ymax);
    writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        f2(x0),
        f2(y1),
        f2(x1 - x0),
        f2(y0 - y1)
    )
    .unwrap();
    if frame.xmin < 0.0 && frame.xmax > 0.0 {
        let (ox, _) = frame.to_screen(0.0, 0.0);
        writeln!(out, r##"<line class="axis" x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#bbb"/>"##, f2(ox), f2(y1), f2(y0)).unwrap();
    }
    if frame.ymin < 0.0 && frame.ymax > 0.0 {
        let (_, oy) = frame.to_screen(0.0, 0.0);
        writeln!(out, r##"<line class="axis" x1="{1}" y1="{0}" x2="{2}" y2="{0}" stroke="#bbb"/>"##, f2(oy), f2(x0), f2(x1)).unwrap();
    }
    let label = |out: &mut String, x: f64, y: f64, anchor: &str, text: f64| {
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            f2(x),
            f2(y),
            f2(text)
        )
        .unwrap();
    };
    label(out, x0, y0 + 14.0, "middle", frame.xmin);
    label(out, x1, y0 + 14.0, "middle", frame.xmax);
    label(out, x0 - 4.0, y0, "end", frame.ymin);
    label(out, x0 - 4.0, y1 + 4.0, "end", frame.ymax);
}

fn scatter(out: &mut String, frame: &Frame, points: &[Vec<f64>], labels: Option<&[usize]>) {
    out.push_str("<g class=\"scatter\" fill-opacity=\"0.6\">\n");
    for (i, p) in points.iter().enumerate() {
        let (sx, sy) = frame.to_screen(p[0], p[1]);
        let color = PALETTE[labels.map_or(0, |l| l[i]) % PALETTE.len()];
        writeln!(out, r#"<circle cx="{}" cy="{}" r="1.6" fill="{color}"/>"#, f2(sx), f2(sy)).unwrap();
    }
    out.push_str("</g>\n");
}

fn quiver(out: &mut String, frame: &Frame, arrows: &[Arrow]) {
    out.push_str("<g class=\"quiver\" stroke=\"#555\" stroke-width=\"1\">\n");
    for a in arrows {
        if a.dx == 0.0 && a.dy == 0.0 {
            continue;
        }
        let (x1, y1) = frame.to_screen(a.x, a.y);
        let (x2, y2) = frame.to_screen(a.x + a.dx, a.y + a.dy);
        writeln!(out, r#"<line class="arrow" x1="{}" y1="{}" x2="{}" y2="{}"/>"#, f2(x1), f2(y1), f2(x2), f2(y2)).unwrap();
        let (ux, uy) = (x2 - x1, y2 - y1);
        let len = ux.hypot(uy);
        if len > 0.0 {
            let h = (0.3 * len).min(4.0);
            let (bx, by) = (ux / len, uy / len);
            let (lx, ly) = (x2 - h * bx + 0.5 * h * by, y2 - h * by - 0.5 * h * bx);
            let (rx, ry) = (x2 - h * bx - 0.5 * h * by, y2 - h * by + 0.5 * h * bx);
            writeln!(
                out,
                r#"<polyline class="head" fill="none" points="{},{} {},{} {},{}"/>"#,
                f2(lx),
                f2(ly),
                f2(x2),
                f2(y2),
                f2(rx),
                f2(ry)
            )
            .unwrap();
        }
    }
    out.push_str("</g>\n");
}

fn trajectories(out: &mut String, frame: &Frame, paths: &[Vec<Vec<f64>>]) {
    out.push_str("<g class=\"trajectories\" fill=\"none\" stroke-width=\"1.2\">\n");
    for (i, path) in paths.iter().enumerate() {
        let color = PALETTE[(i + 1) % PALETTE.len()];
        let pts: Vec<String> = path
            .iter()
            .map(|p| {
                let (sx, sy) = frame.to_screen(p[0], p[1]);
                format!("{},{}", f2(sx), f2(sy))
            })
            .collect();
        writeln!(out, r#"<polyline stroke="{color}" points="{}"/>"#, pts.join(" ")).unwrap();
        if let Some(first) = path.first() {
            let (sx, sy) = frame.to_screen(first[0], first[1]);
            writeln!(out, r##"<circle class="start" cx="{}" cy="{}" r="3" fill="#000"/>"##, f2(sx), f2(sy)).unwrap();
        }
    }
    out.push_str("</g>\n");
}

/// Line segments of the `level` iso-line by marching squares.
pub fn marching_squares(grid: &Grid, level: f64) -> Vec<[(f64, f64); 2]> {
    let mut segs = Vec::new();
    let (xs, ys, v) = (&grid.xs, &grid.ys, &grid.values);
    let lerp = |a: (f64, f64, f64), b: (f64, f64, f64)| -> (f64, f64) {
        let t = if b.2 == a.2 { 0.5 } else { (level - a.2) / (b.2 - a.2) };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    for j in 0..ys.len().saturating_sub(1) {
        for i in 0..xs.len().saturating_sub(1) {
            // Corners counter-clockwise from bottom-left.
            let c = [
                (xs[i], ys[j], v[j][i]),
                (xs[i + 1], ys[j], v[j][i + 1]),
                (xs[i + 1], ys[j + 1], v[j + 1][i + 1]),
                (xs[i], ys[j + 1], v[j + 1][i]),
            ];
            let above: Vec<bool> = c.iter().map(|p| p.2 > level).collect();
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if above[a] != above[b] {
                    crossings.push((e, lerp(c[a], c[b])));
                }
            }
            match crossings.len() {
                2 => segs.push([crossings[0].1, crossings[1].1]),
                4 => {
                    let center = c.iter().map(|p| p.2).sum::<f64>() / 4.0;
                    // Edges 0..3 = bottom, right, top, left.
                    if (center > level) == above[0] {
                        segs.push([crossings[0].1, crossings[1].1]);
                        segs.push([crossings[2].1, crossings[3].1]);
                    } else {
                        segs.push([crossings[0].1, crossings[3].1]);
                        segs.push([crossings[1].1, crossings[2].1]);
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

fn contours(out: &mut String, frame: &Frame, grid: &Grid, fractions: &[f64]) {
    let max = grid.max();
    out.push_str("<g class=\"contours\" fill=\"none\" stroke=\"#2a7\" stroke-width=\"0.8\">\n");
    if max.is_finite() && max > 0.0 {
        for f in fractions {
            let segs = marching_squares(grid, f * max);
            if segs.is_empty() {
                continue;
            }
            let mut d = String::new();
            for [a, b] in segs {
                let (ax, ay) = frame.to_screen(a.0, a.1);
                let (bx, by) = frame.to_screen(b.0, b.1);
                write!(d, "M{},{}L{},{}", f2(ax), f2(ay), f2(bx), f2(by)).unwrap();
            }
            writeln!(out, r#"<path data-level="{}" d="{d}"/>"#, f2(*f)).unwrap();
        }
    }
    out.push_str("</g>\n");
}

/// Renders the layers in order over shared axes.
pub fn render_svg(layers: &[Layer], frame: &Frame) -> Result<String> {
    for l in layers {
        match l {
            Layer::Scatter { points, labels } => {
                check_2d(points)?;
                if labels.as_ref().is_some_and(|l| l.len() != points.len()) {
                    return Err(CoreError::Contract("one label per point required".into()).into());
                }
            }
            Layer::Trajectories { paths } => paths.iter().try_for_each(|p| check_2d(p))?,
            _ => {}
        }
    }
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        frame.size
    )
    .unwrap();
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n");
    axes(&mut out, frame);
    for l in layers {
        match l {
            Layer::Scatter { points, labels } => scatter(&mut out, frame, points, labels.as_deref()),
            Layer::Quiver { arrows } => quiver(&mut out, frame, arrows),
            Layer::Trajectories { paths } => trajectories(&mut out, frame, paths),
            Layer::DensityContour { grid, fractions } => contours(&mut out, frame, grid, fractions),
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_svg(path: &Path, layers: &[Layer], frame: &Frame) -> Result<()> {
    error::write(path, render_svg(layers, frame)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn screen_mapping_inverts() {
        let f = Frame::new(-2.0, 3.0, -1.0, 4.0);
        let (sx, sy) = f.to_screen(0.5, 2.5);
        let (x, y) = f.from_screen(sx, sy);
        assert!((x - 0.5).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);
    }

    #[test]
    fn circle_contour_has_expected_radius() {
        let f = Frame::square(2.0);
        let grid = Grid::sample(&f, 81, |x, y| (-(x * x + y * y) / 2.0).exp());
        let level = (-0.5f64).exp();
        let segs = marching_squares(&grid, level);
        assert!(!segs.is_empty());
        for s in segs {
            for (x, y) in s {
                assert!(((x * x + y * y).sqrt() - 1.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn rejects_non_planar_points() {
        let layers = [Layer::Scatter {
            points: vec![vec![1.0, 2.0, 3.0]],
            labels: None,
        }];
        assert!(render_svg(&layers, &Frame::square(1.0)).is_err());
    }
}
