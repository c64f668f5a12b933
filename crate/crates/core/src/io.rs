//! CSV encodings for contours, momenta and spectrograms.
//!
//! Floats are written in scientific notation with 17 significant digits so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;

use crate::contour::{Contour, ContourKind, Spectrogram};
use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn series_csv(header: &str, values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 28 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for (t, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{t},{}", fmt_f64(*v));
    }
    out
}

fn parse_series(text: &str, header: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(Error::Parse(format!(
                "expected header `{header}`, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut values = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("row {row}: expected two columns")))?;
        let t: usize = t
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("row {row}: bad frame index `{t}`")))?;
        if t != values.len() {
            return Err(Error::Parse(format!("row {row}: frame index {t} out of order")));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("row {row}: bad value `{v}`")))?;
        values.push(v);
    }
    Ok(values)
}

pub fn contour_to_csv(c: &Contour) -> String {
    series_csv("t,value", c.values())
}

pub fn contour_from_csv(text: &str, kind: ContourKind) -> Result<Contour> {
    Contour::new(parse_series(text, "t,value")?, kind)
}

pub fn momenta_to_csv(m: &[f64]) -> String {
    series_csv("t,momentum", m)
}

pub fn momenta_from_csv(text: &str) -> Result<Vec<f64>> {
    parse_series(text, "t,momentum")
}

pub fn spectrogram_to_csv(s: &Spectrogram) -> String {
    let mut out = String::from("t");
    for f in 0..s.bins() {
        let _ = write!(out, ",f{f}");
    }
    out.push('\n');
    for t in 0..s.frames() {
        out.push_str(&t.to_string());
        for v in s.row(t) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn spectrogram_from_csv(text: &str) -> Result<Spectrogram> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty spectrogram file".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(Error::Parse(format!("bad spectrogram header `{header}`")));
    }
    for (f, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{f}") {
            return Err(Error::Parse(format!("bad spectrogram column `{c}`")));
        }
    }
    let bins = cols.len() - 1;
    let mut data = Vec::new();
    let mut frames = 0;
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != bins + 1 {
            return Err(Error::Parse(format!(
                "row {row}: expected {} columns, got {}",
                bins + 1,
                fields.len()
            )));
        }
        if fields[0].parse::<usize>().ok() != Some(frames) {
            return Err(Error::Parse(format!("row {row}: frame index out of order")));
        }
        for v in &fields[1..] {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {row}: bad value `{v}`")))?,
            );
        }
        frames += 1;
    }
    Spectrogram::new(frames, bins, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn contour_layout() {
        let c = Contour::f0(vec![100.0, 0.1]).unwrap();
        let text = contour_to_csv(&c);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,value"));
        assert_eq!(lines.next(), Some("0,1.0000000000000000e2"));
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    #[test]
    fn spectrogram_header() {
        let s = Spectrogram::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let text = spectrogram_to_csv(&s);
        assert!(text.starts_with("t,f0,f1,f2\n0,"));
        assert_eq!(spectrogram_from_csv(&text).unwrap(), s);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(contour_from_csv("x,y\n0,1\n", ContourKind::F0).is_err());
        assert!(contour_from_csv("t,value\n1,1\n", ContourKind::F0).is_err());
        assert!(contour_from_csv("t,value\n0,abc\n", ContourKind::F0).is_err());
        assert!(spectrogram_from_csv("t,f0\n0,1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn contour_round_trip_is_bit_exact(values in prop::collection::vec(0.0f64..1e6, 1..40)) {
            let c = Contour::f0(values).unwrap();
            let back = contour_from_csv(&contour_to_csv(&c), ContourKind::F0).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn spectrogram_round_trip_is_bit_exact(t in 1usize..6, f in 1usize..5, seed in 0u64..1000) {
            let data: Vec<f64> = (0..t * f).map(|i| ((i as u64 * 7919 + seed) % 1009) as f64 / 37.0).collect();
            let s = Spectrogram::new(t, f, data).unwrap();
            prop_assert_eq!(spectrogram_from_csv(&spectrogram_to_csv(&s)).unwrap(), s);
        }
    }
}
