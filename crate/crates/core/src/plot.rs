//! Minimal SVG output for the CLI plots.

use std::fmt::Write;

use crate::potential::{LambdaRect, RegionSample, C64};
use crate::weyl::WeylDisk;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    scale: f64,
}

impl Frame {
    // equal scaling on both axes so circles stay circles
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| {
            let w = (b - a).abs().max(1e-12);
            (a - 0.05 * w, b + 0.05 * w)
        };
        let (mut x, mut y) = (pad(x), pad(y));
        let (wx, wy) = (x.1 - x.0, y.1 - y.0);
        if wx > wy {
            let d = 0.5 * (wx - wy);
            y = (y.0 - d, y.1 + d);
        } else {
            let d = 0.5 * (wy - wx);
            x = (x.0 - d, x.1 + d);
        }
        let scale = (SIZE - 2.0 * MARGIN) / (x.1 - x.0);
        Self { x, y, scale }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) * self.scale
    }

    fn py(&self, v: f64) -> f64 {
        SIZE - MARGIN - (v - self.y.0) * self.scale
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle">{title}</text>"#, SIZE / 2.0);
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        w = SIZE - 2.0 * MARGIN
    );
    let b = SIZE - MARGIN;
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{:.3}</text>"#, b + 16.0, f.x.0);
    let _ = writeln!(s, r#"<text x="{b}" y="{}" text-anchor="end">{:.3}</text>"#, b + 16.0, f.x.1);
    let _ = writeln!(s, r#"<text x="4" y="{b}">{:.3}</text>"#, f.y.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{:.3}</text>"#, MARGIN + 12.0, f.y.1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, SIZE / 2.0, b + 32.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#, SIZE / 2.0, SIZE / 2.0);
}

fn rect_outline(s: &mut String, f: &Frame, r: &LambdaRect) {
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#,
        f.px(r.re.0),
        f.py(r.im.1),
        (r.re.1 - r.re.0) * f.scale,
        (r.im.1 - r.im.0) * f.scale
    );
}

/// Points of the complex plane, with the search rectangle dashed.
pub fn eigenvalue_plot(points: &[C64], region: &LambdaRect) -> String {
    let mut xr = region.re;
    let mut yr = region.im;
    for p in points {
        xr = (xr.0.min(p.re), xr.1.max(p.re));
        yr = (yr.0.min(p.im), yr.1.max(p.im));
    }
    let f = Frame::new(xr, yr);
    let mut s = open("eigenvalues");
    axes(&mut s, &f, "Re lambda", "Im lambda");
    rect_outline(&mut s, &f, region);
    for p in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="crimson"/>"#, f.px(p.re), f.py(p.im));
    }
    s.push_str("</svg>\n");
    s
}

/// The Weyl disks of a schedule, largest first.
pub fn disk_plot(disks: &[WeylDisk]) -> String {
    let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
    let mut yr = xr;
    // the first disk can be huge; frame on the later ones when it dwarfs them
    let framed: Vec<&WeylDisk> = match disks.last() {
        Some(last) => disks.iter().filter(|d| d.radius <= 1e3 * last.radius.max(1e-3)).collect(),
        None => Vec::new(),
    };
    for d in &framed {
        xr = (xr.0.min(d.center.re - d.radius), xr.1.max(d.center.re + d.radius));
        yr = (yr.0.min(d.center.im - d.radius), yr.1.max(d.center.im + d.radius));
    }
    if !xr.0.is_finite() {
        xr = (-1.0, 1.0);
        yr = (-1.0, 1.0);
    }
    let f = Frame::new(xr, yr);
    let mut s = open("Weyl disk nesting");
    axes(&mut s, &f, "Re", "Im");
    let _ = writeln!(s, r#"<clipPath id="box"><rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}"/></clipPath>"#, w = SIZE - 2.0 * MARGIN);
    let _ = writeln!(s, r#"<g clip-path="url(#box)">"#);
    for d in disks {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="none" stroke="steelblue"/>"#,
            f.px(d.center.re),
            f.py(d.center.im),
            (d.radius * f.scale).max(0.5)
        );
    }
    if let Some(d) = disks.last() {
        let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="2" fill="crimson"/>"#, f.px(d.center.re), f.py(d.center.im));
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Membership map of a lambda grid: members shaded by their anchor.
pub fn region_plot(samples: &[RegionSample], region: &LambdaRect, n_re: usize, n_im: usize) -> String {
    let f = Frame::new(region.re, region.im);
    let mut s = open("admissible lambda");
    axes(&mut s, &f, "Re lambda", "Im lambda");
    let cw = if n_re > 1 { (region.re.1 - region.re.0) / (n_re - 1) as f64 } else { region.re.1 - region.re.0 };
    let ch = if n_im > 1 { (region.im.1 - region.im.0) / (n_im - 1) as f64 } else { region.im.1 - region.im.0 };
    let top = samples.iter().filter_map(|r| r.anchor).fold(0.0f64, f64::max).max(1e-12);
    for r in samples {
        let fill = match r.anchor {
            Some(a) => {
                let t = a / top;
                let g = (220.0 - 160.0 * t) as u8;
                format!("rgb(40,{g},90)")
            }
            None => "rgb(200,200,200)".to_string(),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            f.px(r.lambda.re - 0.5 * cw),
            f.py(r.lambda.im + 0.5 * ch),
            (cw * f.scale).max(1.0),
            (ch * f.scale).max(1.0)
        );
    }
    rect_outline(&mut s, &f, region);
    s.push_str("</svg>\n");
    s
}
