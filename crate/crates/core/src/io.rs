//! Text and image formats.
//!
//! * landmarks: CSV `i,x,y`, rows sorted by `i`, indices contiguous from 0
//! * observations: CSV `sample,i,x,y`
//! * trajectories: CSV `s,t,i,qx,qy,px,py`
//! * image velocity strings: CSV `t,k,x,y,ux,uy`
//! * images: PGM, plain (P2) or raw (P5), intensities mapped to `[0, 1]`
//!
//! Every real is written with 17 significant digits (`{:.16e}`), which
//! round-trips `f64` exactly; writers are pure string builders so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{ImageField, VelocityString};
use crate::landmark::{LandmarkConfig, MomentumPath, Trajectory};
use crate::Vec2;

/// `x` with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

/// Reads CSV records after checking the header; yields `(line, fields)`.
fn csv_rows(text: &str, path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if found.is_empty() || (found.len() == 1 && found[0].is_empty()) {
        return Ok(Vec::new());
    }
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_index(s: &str, path: &Path, line: u64, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("{what} `{s}` is not a non-negative integer")))
}

fn parse_real(s: &str, path: &Path, line: u64, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{what} `{s}` is not finite")));
    }
    Ok(v)
}

/// Parses landmark CSV text; `path` is used for messages only.
pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkConfig> {
    let rows = csv_rows(text, path, &["i", "x", "y"])?;
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no landmarks"));
    }
    let mut points = Vec::with_capacity(rows.len());
    for (line, f) in &rows {
        let i = parse_index(&f[0], path, *line, "index")?;
        if i < points.len() {
            return Err(parse_err(path, *line, format!("duplicate landmark index {i}")));
        }
        if i != points.len() {
            return Err(parse_err(
                path,
                *line,
                format!("landmark index {i} out of order, expected {}", points.len()),
            ));
        }
        let x = parse_real(&f[1], path, *line, "x")?;
        let y = parse_real(&f[2], path, *line, "y")?;
        points.push(Vec2::new(x, y));
    }
    LandmarkConfig::new(points)
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkConfig> {
    parse_landmarks(&read_text(path)?, path)
}

pub fn landmarks_csv(config: &LandmarkConfig) -> String {
    let mut out = String::from("i,x,y\n");
    for (i, p) in config.points().iter().enumerate() {
        let _ = writeln!(out, "{i},{},{}", fmt_num(p.x), fmt_num(p.y));
    }
    out
}

/// Observation sets: `sample,i,x,y`, samples contiguous from 0, each with
/// the same landmark count.
pub fn parse_observations(text: &str, path: &Path) -> Result<Vec<LandmarkConfig>> {
    let rows = csv_rows(text, path, &["sample", "i", "x", "y"])?;
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no observations"));
    }
    let mut sets: Vec<Vec<Vec2>> = Vec::new();
    for (line, f) in &rows {
        let s = parse_index(&f[0], path, *line, "sample")?;
        let i = parse_index(&f[1], path, *line, "index")?;
        if s == sets.len() {
            sets.push(Vec::new());
        } else if s + 1 != sets.len() {
            return Err(parse_err(path, *line, format!("sample {s} out of order")));
        }
        let current = sets.last_mut().expect("pushed above");
        if i != current.len() {
            return Err(parse_err(
                path,
                *line,
                format!("landmark index {i} out of order, expected {}", current.len()),
            ));
        }
        current.push(Vec2::new(
            parse_real(&f[2], path, *line, "x")?,
            parse_real(&f[3], path, *line, "y")?,
        ));
    }
    let n = sets[0].len();
    if let Some(bad) = sets.iter().position(|s| s.len() != n) {
        return Err(parse_err(
            path,
            0,
            format!("sample {bad} has {} landmarks, sample 0 has {n}", sets[bad].len()),
        ));
    }
    sets.into_iter().map(LandmarkConfig::new).collect()
}

pub fn load_observations(path: &Path) -> Result<Vec<LandmarkConfig>> {
    parse_observations(&read_text(path)?, path)
}

pub fn observations_csv(samples: &[LandmarkConfig]) -> String {
    let mut out = String::from("sample,i,x,y\n");
    for (s, c) in samples.iter().enumerate() {
        for (i, p) in c.points().iter().enumerate() {
            let _ = writeln!(out, "{s},{i},{},{}", fmt_num(p.x), fmt_num(p.y));
        }
    }
    out
}

/// Trajectory CSV for a list of `(s, q, p)` strings; `s` labels the string
/// (iteration, sample or member).
pub fn trajectories_csv<'a>(strings: impl IntoIterator<Item = (usize, &'a Trajectory, &'a MomentumPath)>) -> String {
    let mut out = String::from("s,t,i,qx,qy,px,py\n");
    for (s, q, p) in strings {
        let n_t = q.n_t();
        for k in 0..n_t {
            let t = k as f64 / (n_t - 1) as f64;
            for i in 0..q.n_landmarks() {
                let (qi, pi) = (q.at(k, i), p.at(k, i));
                let _ = writeln!(
                    out,
                    "{s},{},{i},{},{},{},{}",
                    fmt_num(t),
                    fmt_num(qi.x),
                    fmt_num(qi.y),
                    fmt_num(pi.x),
                    fmt_num(pi.y)
                );
            }
        }
    }
    out
}

/// `(s, q, p)` strings from trajectory CSV text.
pub fn parse_trajectories(text: &str, path: &Path) -> Result<Vec<(usize, Trajectory, MomentumPath)>> {
    let rows = csv_rows(text, path, &["s", "t", "i", "qx", "qy", "px", "py"])?;
    let mut grouped: Vec<(usize, Vec<(usize, usize, Vec2, Vec2)>)> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for (line, f) in &rows {
        let s = parse_index(&f[0], path, *line, "s")?;
        let t = parse_real(&f[1], path, *line, "t")?;
        let i = parse_index(&f[2], path, *line, "index")?;
        let q = Vec2::new(parse_real(&f[3], path, *line, "qx")?, parse_real(&f[4], path, *line, "qy")?);
        let p = Vec2::new(parse_real(&f[5], path, *line, "px")?, parse_real(&f[6], path, *line, "py")?);
        if grouped.last().map(|g| g.0) != Some(s) {
            grouped.push((s, Vec::new()));
            times.clear();
        }
        if i == 0 {
            times.push(t);
        }
        let k = times.len().checked_sub(1).ok_or_else(|| parse_err(path, *line, "time slice must start at index 0"))?;
        grouped.last_mut().expect("pushed").1.push((k, i, q, p));
    }
    grouped
        .into_iter()
        .map(|(s, entries)| {
            let n_t = entries.iter().map(|e| e.0).max().unwrap_or(0) + 1;
            let n = entries.len() / n_t;
            if n * n_t != entries.len() {
                return Err(parse_err(path, 0, format!("string {s} is not a full n_t x N table")));
            }
            let mut q = Trajectory::zeros(n_t, n);
            let mut p = MomentumPath::zeros(n_t, n);
            for (k, i, qi, pi) in entries {
                if i >= n {
                    return Err(parse_err(path, 0, format!("string {s}: landmark {i} out of range")));
                }
                *q.at_mut(k, i) = qi;
                *p.at_mut(k, i) = pi;
            }
            Ok((s, q, p))
        })
        .collect()
}

/// Velocity string CSV: one row per grid point and time index.
pub fn velocity_csv(v: &VelocityString) -> String {
    let mut out = String::from("t,k,x,y,ux,uy\n");
    let n_t = v.n_t();
    for (k, u) in v.velocity.iter().enumerate() {
        let t = k as f64 / (n_t - 1) as f64;
        for j in 0..u.ny() {
            for i in 0..u.nx() {
                let w = u.get(i, j);
                let _ = writeln!(out, "{},{k},{i},{j},{},{}", fmt_num(t), fmt_num(w.x), fmt_num(w.y));
            }
        }
    }
    out
}

/// Single-column series with a header, e.g. per-iteration energies.
pub fn series_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses a PGM image (P2 or P5, 8- or 16-bit), rescaling by `maxval`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<ImageField> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg,
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes).ok_or_else(|| bad("empty file".into()))?;
    if magic != "P2" && magic != "P5" {
        return Err(bad(format!("bad magic `{magic}`, expected P2 or P5")));
    }
    let mut header_num = |what: &str| -> Result<usize> {
        let t = token(bytes).ok_or_else(|| bad(format!("truncated header: missing {what}")))?;
        t.parse::<usize>().map_err(|_| bad(format!("bad {what} `{t}`")))
    };
    let nx = header_num("width")?;
    let ny = header_num("height")?;
    let maxval = header_num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} out of range")));
    }
    let count = nx * ny;
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(count);
    if magic == "P2" {
        for n in 0..count {
            let t = token(bytes).ok_or_else(|| bad(format!("truncated payload: {n} of {count} pixels")))?;
            let v: usize = t.parse().map_err(|_| bad(format!("bad pixel `{t}`")))?;
            if v > maxval {
                return Err(bad(format!("pixel {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    } else {
        // exactly one whitespace byte separates maxval from the raster
        let start = pos + 1;
        let width = if maxval > 255 { 2 } else { 1 };
        let end = start + count * width;
        if start > bytes.len() || end > bytes.len() {
            return Err(bad(format!(
                "truncated payload: {} of {} bytes",
                bytes.len().saturating_sub(start),
                count * width
            )));
        }
        let raster = &bytes[start..end];
        for n in 0..count {
            let v = if width == 1 {
                raster[n] as usize
            } else {
                ((raster[2 * n] as usize) << 8) | raster[2 * n + 1] as usize
            };
            if v > maxval {
                return Err(bad(format!("pixel {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    }
    ImageField::new(nx, ny, data)
}

pub fn load_image(path: &Path) -> Result<ImageField> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pgm(&bytes, path)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Raw 8-bit PGM; intensities clamped to `[0, 1]`.
pub fn pgm_p5(img: &ImageField) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.nx(), img.ny()).into_bytes();
    out.extend(img.data().iter().map(|v| quantize(*v)));
    out
}

/// Plain 8-bit PGM.
pub fn pgm_p2(img: &ImageField) -> String {
    let mut out = format!("P2\n{} {}\n255\n", img.nx(), img.ny());
    for j in 0..img.ny() {
        let row: Vec<String> = (0..img.nx()).map(|i| quantize(img.get(i, j)).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Path relative to `base` unless already absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("fixture.csv")
    }

    #[test]
    fn landmark_round_trip() {
        let c = LandmarkConfig::from_xy(&[[0.1, -2.5], [1.0 / 3.0, 1e-17]]).unwrap();
        let text = landmarks_csv(&c);
        assert!(text.starts_with("i,x,y\n0,1.0000000000000001e-1,"));
        assert_eq!(parse_landmarks(&text, p()).unwrap(), c);
    }

    #[test]
    fn landmark_errors_name_lines() {
        let err = parse_landmarks("", p()).unwrap_err().to_string();
        assert!(err.contains("no landmarks"), "{err}");
        let err = parse_landmarks("i,x,y\n", p()).unwrap_err().to_string();
        assert!(err.contains("no landmarks"), "{err}");
        let text = "i,x,y\n0,0,0\n1,1,0\n2,0,1\n3,a,0.5\n";
        let err = parse_landmarks(text, p()).unwrap_err().to_string();
        assert!(err.starts_with("fixture.csv:5:"), "{err}");
        let err = parse_landmarks("i,x,y\n0,0,0\n0,1,1\n", p()).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("duplicate"), "{err}");
        let err = parse_landmarks("i,x,y\n0,0,inf\n", p()).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("finite"), "{err}");
        let err = parse_landmarks("i,x,y\n1,0,0\n", p()).unwrap_err().to_string();
        assert!(err.contains("out of order"), "{err}");
        let err = parse_landmarks("id,x,y\n0,0,0\n", p()).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        let err = parse_landmarks("i,x,y\n0,0\n", p()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_landmarks(Path::new("/nonexistent/l.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/l.csv"));
    }

    #[test]
    fn observation_round_trip() {
        let a = LandmarkConfig::from_xy(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        let b = a.translated(Vec2::new(0.5, -0.25));
        let text = observations_csv(&[a.clone(), b.clone()]);
        assert_eq!(parse_observations(&text, p()).unwrap(), vec![a, b]);
        assert!(parse_observations("sample,i,x,y\n0,0,0,0\n0,1,0,0\n1,0,0,0\n", p()).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let mut q = Trajectory::zeros(3, 2);
        let mut m = MomentumPath::zeros(3, 2);
        for (n, v) in q.data_mut().iter_mut().enumerate() {
            *v = Vec2::new(n as f64 * 0.1, -(n as f64));
        }
        for (n, v) in m.data_mut().iter_mut().enumerate() {
            *v = Vec2::new(1.0 / (n as f64 + 1.0), 0.0);
        }
        let text = trajectories_csv([(0, &q, &m), (7, &q, &m)]);
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 2);
        assert!(text.lines().nth(3).unwrap().starts_with("0,5.0000000000000000e-1,0,"));
        let back = parse_trajectories(&text, p()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, 7);
        assert_eq!(back[1].1, q);
        assert_eq!(back[1].2, m);
    }

    #[test]
    fn pgm_formats() {
        let img = ImageField::from_fn(3, 2, |x, y| (x + 3.0 * y) / 5.0).unwrap();
        let raw = pgm_p5(&img);
        let back = parse_pgm(&raw, p()).unwrap();
        assert_eq!(back.nx(), 3);
        assert_eq!(back.get(2, 1), 1.0);
        let plain = pgm_p2(&img);
        assert_eq!(parse_pgm(plain.as_bytes(), p()).unwrap(), back);

        let max = parse_pgm(b"P2\n# comment\n2 2\n255\n255 0\n0 0\n", p()).unwrap();
        assert_eq!(max.get(0, 0), 1.0);
        let wide = parse_pgm(
            &[b"P5 2 2 1000\n".as_slice(), &[0x03, 0xe8, 0x01, 0xf4, 0, 0, 0, 0]].concat(),
            p(),
        )
        .unwrap();
        assert_eq!(&wide.data()[..2], &[1.0, 0.5]);

        let mut p5 = b"P5\n64 64\n255\n".to_vec();
        p5.extend(std::iter::repeat(128u8).take(64 * 64));
        let big = parse_pgm(&p5, p()).unwrap();
        assert_eq!((big.nx(), big.ny()), (64, 64));

        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0", p()).unwrap_err().to_string().contains("magic"));
        assert!(parse_pgm(&p5[..p5.len() - 10], p()).unwrap_err().to_string().contains("truncated"));
        assert!(parse_pgm(b"P2\n2 2\n255\n1 2 3\n", p()).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn velocity_csv_shape() {
        let v = VelocityString::zeros(3, 2, 2);
        let text = velocity_csv(&v);
        assert_eq!(text.lines().count(), 1 + 3 * 4);
        assert_eq!(text.lines().nth(1).unwrap(), "0.0000000000000000e0,0,0,0,0.0000000000000000e0,0.0000000000000000e0");
    }
}
