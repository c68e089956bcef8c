use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "ToyImage::new",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Row-major flattening of patch `(pr, pc)`.
    fn patch(&self, pr: usize, pc: usize, patch: usize, out: &mut Vec<f64>) {
        out.clear();
        for r in 0..patch {
            let row = (pr * patch + r) * self.width + pc * patch;
            out.extend_from_slice(&self.pixels[row..row + patch]);
        }
    }

    /// Rounds every pixel to the 8-bit grid.
    pub fn quantize_8bit(&self) -> ToyImage {
        ToyImage {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|p| (p * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Binary PGM (`P5`, 8-bit).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    /// Parses a binary 8-bit PGM (`P5`, maxval 255; `#` comments allowed).
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(invalid("truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad PGM header field {s:?}")));
        if fields[0] != "P5" || num(&fields[3])? != 255 {
            return Err(invalid("only 8-bit binary PGM (P5, maxval 255) is supported"));
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let data = bytes.get(i + 1..).unwrap_or_default();
        if data.len() != width * height {
            return Err(invalid(format!(
                "PGM holds {} pixel bytes, header says {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Self::from_bytes(height, width, data)
    }
}

/// `K × D` matrix of quantisation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<f64>,
    pub k: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f64>, k: usize, dim: usize) -> Result<Self> {
        if k == 0 || dim == 0 || entries.len() != k * dim {
            return Err(Error::ShapeMismatch {
                op: "Codebook::new",
                lhs: vec![k, dim],
                rhs: vec![entries.len()],
            });
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(invalid("codebook entries must be finite"));
        }
        let cb = Self { entries, k, dim };
        for a in 0..k {
            for b in a + 1..k {
                if cb.entry(a) == cb.entry(b) {
                    return Err(invalid(format!("codebook entries {a} and {b} are identical")));
                }
            }
        }
        Ok(cb)
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest entry (squared L2); ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(self.entry(i), v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Smallest L2 distance between two distinct entries.
    pub fn min_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for a in 0..self.k {
            for b in a + 1..self.k {
                gap = gap.min(sq_dist(self.entry(a), self.entry(b)).sqrt());
            }
        }
        gap
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_geometry(height: usize, width: usize, cb: &Codebook, patch: usize) -> Result<()> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(invalid(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    if cb.dim != patch * patch {
        return Err(invalid(format!(
            "codebook dimension {} does not match patch area {}",
            cb.dim,
            patch * patch
        )));
    }
    Ok(())
}

/// Maps each patch (row-major order) to its nearest codebook index.
pub fn vq_encode(img: &ToyImage, cb: &Codebook, patch: usize) -> Result<Vec<usize>> {
    check_geometry(img.height, img.width, cb, patch)?;
    let (ph, pw) = (img.height / patch, img.width / patch);
    let mut buf = Vec::with_capacity(patch * patch);
    let mut tokens = Vec::with_capacity(ph * pw);
    for pr in 0..ph {
        for pc in 0..pw {
            img.patch(pr, pc, patch, &mut buf);
            tokens.push(cb.nearest(&buf));
        }
    }
    Ok(tokens)
}

/// Tiles codebook entries back into an image, clamping to `[0, 1]`.
pub fn vq_decode(tokens: &[usize], cb: &Codebook, patch: usize, height: usize, width: usize) -> Result<ToyImage> {
    check_geometry(height, width, cb, patch)?;
    let (ph, pw) = (height / patch, width / patch);
    if tokens.len() != ph * pw {
        return Err(invalid(format!(
            "expected {} image tokens, got {}",
            ph * pw,
            tokens.len()
        )));
    }
    let mut pixels = vec![0.0; height * width];
    for (t, &id) in tokens.iter().enumerate() {
        if id >= cb.k {
            return Err(Error::TokenOutOfRange { id, limit: cb.k });
        }
        let (pr, pc) = (t / pw, t % pw);
        let e = cb.entry(id);
        for r in 0..patch {
            for c in 0..patch {
                pixels[(pr * patch + r) * width + pc * patch + c] = e[r * patch + c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(ToyImage {
        height,
        width,
        pixels,
    })
}

const KMEANS_MAX_ITERS: usize = 50;

/// Seeded k-means (k-means++ initialisation) over every patch of `images`.
pub fn fit_codebook(images: &[ToyImage], k: usize, patch: usize, seed: u64) -> Result<Codebook> {
    if k == 0 || patch == 0 {
        return Err(invalid("codebook size and patch must be positive"));
    }
    let dim = patch * patch;
    let mut points: Vec<f64> = Vec::new();
    let mut buf = Vec::with_capacity(dim);
    for img in images {
        if img.height % patch != 0 || img.width % patch != 0 {
            return Err(invalid(format!(
                "image {}x{} is not divisible into {patch}x{patch} patches",
                img.height, img.width
            )));
        }
        for pr in 0..img.height / patch {
            for pc in 0..img.width / patch {
                img.patch(pr, pc, patch, &mut buf);
                points.extend_from_slice(&buf);
            }
        }
    }
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut keys: Vec<Vec<u64>> = (0..n).map(|i| point(i).iter().map(|x| x.to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() < k {
        return Err(invalid(format!(
            "only {} distinct patches available for a codebook of size {k}",
            keys.len()
        )));
    }
    drop(keys);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // Floating round-off can land on a zero-weight tail; fall back to the farthest point.
        if d2[pick] == 0.0 {
            pick = argmax(&d2);
        }
        let c = centers.len() / dim;
        centers.extend_from_slice(point(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(point(i), &centers[c * dim..(c + 1) * dim]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let cb = Codebook {
            entries: centers.clone(),
            k,
            dim,
        };
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let a = cb.nearest(point(i));
            dist[i] = sq_dist(point(i), cb.entry(a));
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the worst-served point.
                let far = argmax(&dist);
                dist[far] = 0.0;
                centers[c * dim..(c + 1) * dim].copy_from_slice(point(far));
            } else {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Codebook::new(centers, k, dim)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
