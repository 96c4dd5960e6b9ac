//! Dataset formats, loaders and synthetic generators.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, QtError, Result};
use crate::grid::Label;
use crate::tensor::Matrix;

/// Binary samples, one row per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    pub n_vars: usize,
    pub rows: Vec<Vec<u8>>,
}

impl BinaryDataset {
    pub fn new(n_vars: usize, rows: Vec<Vec<u8>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_vars {
                return invalid(format!("row {i} has {} values, expected {n_vars}", r.len()));
            }
            if r.iter().any(|&x| x > 1) {
                return invalid(format!("row {i} holds a non-binary value"));
            }
        }
        Ok(BinaryDataset { n_vars, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let line: Vec<&str> = r.iter().map(|&x| if x == 1 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> QtError {
    QtError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Space-separated 0/1 tokens, one sample per line. Blank lines are skipped.
pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| match tok {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(parse_err(path, i + 1, format!("expected 0 or 1, found `{other}`"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(path, i + 1, format!("row has {} values, expected {w}", row.len())));
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(BinaryDataset {
        n_vars: width.unwrap_or(0),
        rows,
    })
}

/// Comma-separated reals, one sample per line.
pub fn load_continuous(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut n = 0;
    let mut outside = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                let x: f64 = tok.trim().parse().map_err(|_| parse_err(path, i + 1, format!("not a number: `{}`", tok.trim())))?;
                if !x.is_finite() {
                    return Err(parse_err(path, i + 1, "non-finite value"));
                }
                Ok(x)
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(path, i + 1, format!("row has {} values, expected {w}", row.len())));
            }
            _ => {}
        }
        outside += row.iter().filter(|x| !(0.0..=1.0).contains(*x)).count();
        data.extend(row);
        n += 1;
    }
    if outside > 0 {
        warn!("{}: {outside} values lie outside [0, 1]", path.display());
    }
    Matrix::from_vec(n, width.unwrap_or(0), data)
}

pub fn continuous_to_text(m: &Matrix) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// A noisy contour image and its noiseless labels, both row-major `R x C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorderOwnershipPair {
    pub rows: usize,
    pub cols: usize,
    pub image: Vec<u8>,
    pub labels: Vec<Label>,
}

impl BorderOwnershipPair {
    /// Every CONTOUR pixel must touch (8-connectivity) both an IN and an OUT pixel.
    pub fn labels_valid(&self) -> bool {
        let (r, c) = (self.rows as isize, self.cols as isize);
        (0..self.labels.len()).all(|p| {
            if self.labels[p] != Label::Contour {
                return true;
            }
            let (pr, pc) = ((p / self.cols) as isize, (p % self.cols) as isize);
            let (mut seen_in, mut seen_out) = (false, false);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (pr + dr, pc + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= r || nc >= c {
                        continue;
                    }
                    match self.labels[(nr * c + nc) as usize] {
                        Label::In => seen_in = true,
                        Label::Out => seen_out = true,
                        Label::Contour => {}
                    }
                }
            }
            seen_in && seen_out
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl std::str::FromStr for ShapeKind {
    type Err = QtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" | "rect" => Ok(ShapeKind::Rectangle),
            "ellipse" => Ok(ShapeKind::Ellipse),
            other => invalid(format!("unknown shape kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BorderConfig {
    pub rows: usize,
    pub cols: usize,
    pub shape: ShapeKind,
    pub p_drop: f64,
    pub n_spurious: usize,
    pub spur_len: usize,
}

impl BorderConfig {
    pub fn new(rows: usize, cols: usize, shape: ShapeKind) -> Self {
        BorderConfig {
            rows,
            cols,
            shape,
            p_drop: 0.2,
            n_spurious: 8,
            spur_len: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // the smallest shape is 3x3 (one IN pixel) and needs a 2-pixel margin
        if self.rows < 7 || self.cols < 7 {
            return invalid(format!("a {}x{} grid cannot hold a shape with a 2-pixel margin", self.rows, self.cols));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return invalid(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if self.spur_len == 0 && self.n_spurious > 0 {
            return invalid("spurious segments need a positive length");
        }
        Ok(())
    }
}

const MARGIN: usize = 2;

/// Filled-shape mask inside a random bounding box.
fn sample_shape<R: Rng + ?Sized>(cfg: &BorderConfig, rng: &mut R) -> Vec<bool> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let h = rng.random_range(3..=rows - 2 * MARGIN);
    let w = rng.random_range(3..=cols - 2 * MARGIN);
    let top = rng.random_range(MARGIN..=rows - MARGIN - h);
    let left = rng.random_range(MARGIN..=cols - MARGIN - w);
    let mut mask = vec![false; rows * cols];
    let (cy, cx) = (top as f64 + (h as f64 - 1.0) / 2.0, left as f64 + (w as f64 - 1.0) / 2.0);
    let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
    for r in top..top + h {
        for c in left..left + w {
            mask[r * cols + c] = match cfg.shape {
                ShapeKind::Rectangle => true,
                ShapeKind::Ellipse => {
                    let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                }
            };
        }
    }
    mask
}

/// Filled pixels with an unfilled 8-neighbour become CONTOUR, other filled pixels IN.
fn label_shape(mask: &[bool], rows: usize, cols: usize) -> Vec<Label> {
    (0..rows * cols)
        .map(|p| {
            if !mask[p] {
                return Label::Out;
            }
            let (r, c) = ((p / cols) as isize, (p % cols) as isize);
            let boundary = (-1..=1).any(|dr| {
                (-1..=1).any(|dc| {
                    let (nr, nc) = (r + dr, c + dc);
                    nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize || !mask[(nr * cols as isize + nc) as usize]
                })
            });
            if boundary {
                Label::Contour
            } else {
                Label::In
            }
        })
        .collect()
}

const SEGMENT_STEPS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

fn generate_pair<R: Rng + ?Sized>(cfg: &BorderConfig, rng: &mut R) -> BorderOwnershipPair {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let labels = loop {
        let labels = label_shape(&sample_shape(cfg, rng), rows, cols);
        // thin ellipses can leave contour pixels with no interior neighbour; resample those
        let candidate = BorderOwnershipPair { rows, cols, image: Vec::new(), labels };
        if candidate.labels.contains(&Label::In) && candidate.labels_valid() {
            break candidate.labels;
        }
    };
    let mut image: Vec<u8> = labels
        .iter()
        .map(|&l| (l == Label::Contour && rng.random::<f64>() >= cfg.p_drop) as u8)
        .collect();
    for _ in 0..cfg.n_spurious {
        let (dr, dc) = SEGMENT_STEPS[rng.random_range(0..4)];
        let r0 = rng.random_range(0..rows) as isize;
        let c0 = rng.random_range(0..cols) as isize;
        for k in 0..cfg.spur_len as isize {
            let (r, c) = (r0 + k * dr, c0 + k * dc);
            if r >= 0 && c >= 0 && r < rows as isize && c < cols as isize {
                image[r as usize * cols + c as usize] = 1;
            }
        }
    }
    BorderOwnershipPair { rows, cols, image, labels }
}

/// Random filled shapes with a noisy contour channel and spurious edge segments.
pub fn gen_border_ownership<R: Rng + ?Sized>(n: usize, cfg: &BorderConfig, rng: &mut R) -> Result<Vec<BorderOwnershipPair>> {
    cfg.validate()?;
    Ok((0..n).map(|_| generate_pair(cfg, rng)).collect())
}

/// Text form: header `R C`, R label rows, a blank line, R image rows; one block per pair.
pub fn border_to_text(pairs: &[BorderOwnershipPair]) -> String {
    let mut s = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "{} {}", pair.rows, pair.cols);
        let grid = |s: &mut String, vals: &mut dyn Iterator<Item = u8>| {
            let vals: Vec<u8> = vals.collect();
            for row in vals.chunks(pair.cols) {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        };
        grid(&mut s, &mut pair.labels.iter().map(|l| l.code()));
        s.push('\n');
        grid(&mut s, &mut pair.image.iter().copied());
    }
    s
}

fn parse_ints(path: &Path, no: usize, line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(path, no + 1, format!("not an integer: `{t}`"))))
        .collect()
}

fn read_grid<'a>(path: &Path, lines: &mut impl Iterator<Item = (usize, &'a str)>, (rows, cols): (usize, usize), what: &str, max: usize) -> Result<Vec<u8>> {
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let Some((no, line)) = lines.next() else {
            return Err(parse_err(path, 0, format!("file ends inside the {what} grid")));
        };
        let row = parse_ints(path, no, line)?;
        if row.len() != cols {
            return Err(parse_err(path, no + 1, format!("{what} row has {} values, expected {cols}", row.len())));
        }
        if let Some(bad) = row.iter().find(|&&v| v > max) {
            return Err(parse_err(path, no + 1, format!("{what} value {bad} out of range")));
        }
        vals.extend(row.iter().map(|&v| v as u8));
    }
    Ok(vals)
}

pub fn parse_border(path: &Path, text: &str) -> Result<Vec<BorderOwnershipPair>> {
    let mut lines = text.lines().enumerate().peekable();
    let mut pairs = Vec::new();
    loop {
        while lines.peek().is_some_and(|(_, l)| l.trim().is_empty()) {
            lines.next();
        }
        let Some((no, header)) = lines.next() else { break };
        let dims = parse_ints(path, no, header)?;
        let [rows, cols] = dims[..] else {
            return Err(parse_err(path, no + 1, "header must be `R C`"));
        };
        if rows == 0 || cols == 0 {
            return Err(parse_err(path, no + 1, "grid dimensions must be positive"));
        }
        let labels = read_grid(path, &mut lines, (rows, cols), "label", 2)?.into_iter().map(|v| Label::from_code(v).expect("range checked")).collect();
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => {}
            Some((no, _)) => return Err(parse_err(path, no + 1, "expected a blank line between labels and image")),
            None => return Err(parse_err(path, 0, "file ends before the image grid")),
        }
        let image = read_grid(path, &mut lines, (rows, cols), "image", 1)?;
        pairs.push(BorderOwnershipPair { rows, cols, image, labels });
    }
    Ok(pairs)
}

pub fn load_border(path: impl AsRef<Path>) -> Result<Vec<BorderOwnershipPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_border(path, &text)
}

/// Seeded permutation, then contiguous train / validation / test cuts.
pub fn split<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|&f| !(0.0..=1.0).contains(&f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_val]), pick(&order[n_train + n_val..])))
}

/// Smooth random textures in `[0, 1]`: a few random plane waves plus pixel noise,
/// squashed through a sigmoid. Rows are flattened `size x size` images.
pub fn gen_textures<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Matrix> {
    if size == 0 {
        return invalid("texture size must be positive");
    }
    const WAVES: usize = 3;
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let freq = rng.random_range(0.3..0.9);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.5);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        for r in 0..size {
            for c in 0..size {
                let s: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (fy * r as f64 + fx * c as f64 + ph).sin()).sum();
                let noise = 0.3 * rng.random_range(-1.0..1.0);
                data.push(crate::numerics::sigmoid(s + noise));
            }
        }
    }
    Matrix::from_vec(n, size * size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_with(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn binary_loader() {
        let f = temp_with("1 0 1\n0 0 1\n");
        let d = load_binary(f.path()).unwrap();
        assert_eq!(d.rows, vec![vec![1, 0, 1], vec![0, 0, 1]]);
        assert_eq!(d.n_vars, 3);

        let f = temp_with("1 0\n1 2\n");
        match load_binary(f.path()) {
            Err(QtError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let f = temp_with("1 0\n1\n");
        assert!(matches!(load_binary(f.path()), Err(QtError::Parse { line: 2, .. })));

        let f = temp_with("");
        assert!(load_binary(f.path()).unwrap().is_empty());

        let d = BinaryDataset::new(2, vec![vec![0, 1], vec![1, 1]]).unwrap();
        let f = temp_with(&d.to_text());
        assert_eq!(load_binary(f.path()).unwrap(), d);
    }

    #[test]
    fn continuous_loader() {
        let f = temp_with("0.5,0.25\n1.5,-0.1\n");
        let m = load_continuous(f.path()).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 1)], -0.1);
        let f = temp_with("0.5,abc\n");
        assert!(matches!(load_continuous(f.path()), Err(QtError::Parse { line: 1, .. })));
        let f = temp_with("0.5,inf\n");
        assert!(load_continuous(f.path()).is_err());
        let f = temp_with(&continuous_to_text(&m));
        assert_eq!(load_continuous(f.path()).unwrap(), m);
    }

    #[test]
    fn noiseless_generator_lights_exactly_the_contour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [ShapeKind::Rectangle, ShapeKind::Ellipse] {
            let cfg = BorderConfig {
                p_drop: 0.0,
                n_spurious: 0,
                ..BorderConfig::new(12, 14, shape)
            };
            for pair in gen_border_ownership(50, &cfg, &mut rng).unwrap() {
                assert!(pair.labels_valid());
                for (y, l) in pair.image.iter().zip(&pair.labels) {
                    assert_eq!(*y == 1, *l == Label::Contour);
                }
            }
            let dark = BorderConfig { p_drop: 1.0, ..cfg };
            for pair in gen_border_ownership(20, &dark, &mut rng).unwrap() {
                assert!(pair.image.iter().all(|&y| y == 0));
            }
        }
    }

    #[test]
    fn generator_drop_rate_and_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BorderConfig {
            n_spurious: 0,
            ..BorderConfig::new(16, 16, ShapeKind::Rectangle)
        };
        let (mut lit, mut total) = (0usize, 0usize);
        while total < 10_000 {
            for pair in gen_border_ownership(10, &cfg, &mut rng).unwrap() {
                for (y, l) in pair.image.iter().zip(&pair.labels) {
                    if *l == Label::Contour {
                        total += 1;
                        lit += *y as usize;
                    }
                }
            }
        }
        let frac = lit as f64 / total as f64;
        assert!((0.78..=0.82).contains(&frac), "lit fraction {frac}");

        let noisy = BorderConfig::new(12, 12, ShapeKind::Ellipse);
        let pairs = gen_border_ownership(200, &noisy, &mut rng).unwrap();
        assert!(pairs.iter().all(BorderOwnershipPair::labels_valid));
    }

    #[test]
    fn generator_is_reproducible_and_checks_geometry() {
        let cfg = BorderConfig::new(12, 12, ShapeKind::Rectangle);
        let a = gen_border_ownership(5, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_border_ownership(5, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let tiny = BorderConfig::new(6, 12, ShapeKind::Rectangle);
        assert!(gen_border_ownership(1, &tiny, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn border_text_round_trip() {
        let cfg = BorderConfig::new(9, 8, ShapeKind::Ellipse);
        let pairs = gen_border_ownership(3, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let f = temp_with(&border_to_text(&pairs));
        assert_eq!(load_border(f.path()).unwrap(), pairs);

        let f = temp_with("2 2\n0 1\n2 3\n\n0 0\n1 1\n");
        assert!(matches!(load_border(f.path()), Err(QtError::Parse { line: 3, .. })));
        let f = temp_with("2 2\n0 1\n2 1\n\n0 0\n");
        assert!(load_border(f.path()).is_err());
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split(&items, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, (0.8, 0.1, 0.1), 3).unwrap().0, a);
        assert_ne!(split(&items, (0.8, 0.1, 0.1), 4).unwrap().0, a);
        assert!(split(&items, (0.8, 0.1, 0.2), 3).is_err());
    }

    #[test]
    fn textures_lie_in_the_unit_interval() {
        let m = gen_textures(10, 12, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(m.shape(), (10, 144));
        assert!(m.as_slice().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
