//! Detection and ground-truth CSV: `frame,cx,cy,w,l,yaw,score,class`, with
//! an empty score for ground truth.

use std::fmt::Write as _;
use std::path::Path;

use crate::detect::{FrameBox, OrientedBox};
use crate::error::{Error, Result};

pub const HEADER: &str = "frame,cx,cy,w,l,yaw,score,class";

pub fn to_csv(boxes: &[FrameBox]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for fb in boxes {
        let b = &fb.bbox;
        let score = b.score.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            fb.frame, b.center[0], b.center[1], b.width, b.length, b.yaw, score, b.class
        );
    }
    s
}

pub fn parse(text: &str) -> Result<Vec<FrameBox>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(Error::Parse(format!("box CSV must start with `{HEADER}`"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let err = |m: String| Error::Parse(format!("line {}: {m}", n + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 8 {
            return Err(err(format!("expected 8 columns, found {}", cols.len())));
        }
        let frame: u64 = cols[0].parse().map_err(|e| err(format!("frame: {e}")))?;
        let mut v = [0.0f64; 5];
        for (slot, (name, text)) in v.iter_mut().zip(["cx", "cy", "w", "l", "yaw"].iter().zip(&cols[1..6])) {
            *slot = text.parse().map_err(|e| err(format!("{name}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("{name} is not finite")));
            }
        }
        if !(v[2] > 0.0 && v[3] > 0.0) {
            return Err(err("w and l must be positive".into()));
        }
        let mut b = OrientedBox::new([v[0], v[1]], v[2], v[3], v[4]);
        if !cols[6].is_empty() {
            let score: f64 = cols[6].parse().map_err(|e| err(format!("score: {e}")))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(err(format!("score {score} outside [0, 1]")));
            }
            b = b.with_score(score);
        }
        b.class = cols[7].to_string();
        out.push(FrameBox { frame, bbox: b });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<FrameBox>> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let boxes = vec![
            FrameBox {
                frame: 3,
                bbox: OrientedBox::new([1.0 / 3.0, -2.5], 1.8, 4.5, 0.1).with_score(0.75),
            },
            FrameBox {
                frame: 4,
                bbox: OrientedBox::new([0.0, 7.25], 2.0, 4.0, -3.0),
            },
        ];
        let text = to_csv(&boxes);
        assert!(text.lines().nth(2).unwrap().ends_with(",,car"));
        assert_eq!(parse(&text).unwrap(), boxes);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(parse("x,y\n").is_err());
        assert!(parse(&format!("{HEADER}\n1,0,0,1,1,0,0.5\n")).is_err());
        assert!(parse(&format!("{HEADER}\n1,0,0,-1,1,0,0.5,car\n")).is_err());
        assert!(parse(&format!("{HEADER}\n1,0,0,1,1,0,1.5,car\n")).is_err());
        assert!(parse(&format!("{HEADER}\na,0,0,1,1,0,,car\n")).is_err());
    }
}
