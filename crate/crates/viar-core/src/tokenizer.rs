//! Frozen multi-scale vector quantizer.
//!
//! An image is mapped to a latent grid by a linear patch encoder, the latent
//! grid is area-averaged down to every resolution of a [`ScaleHierarchy`],
//! and each resolution is quantized independently against one shared
//! [`CodeBook`]. Decoding reads only the finest grid.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

const CODEBOOK_MAGIC: &[u8; 7] = b"VIARCB1";
const KMEANS_MAX_ITERS: usize = 50;

/// Shared code table, `vocab × width`. Frozen once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBook {
    entries: Tensor,
}

impl CodeBook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let [vocab, width] = entries.shape() else {
            return Err(Error::shape("codebook", entries.shape(), &[0, 0]));
        };
        let (vocab, width) = (*vocab, *width);
        if vocab < 2 || width == 0 {
            return Err(Error::Data(format!(
                "codebook needs at least 2 codes of nonzero width, got {vocab}×{width}"
            )));
        }
        if !entries.is_finite() {
            return Err(Error::Data("codebook has non-finite entries".into()));
        }
        for i in 0..vocab {
            for j in 0..i {
                if sq_dist(entries.row(i), entries.row(j)).sqrt() <= 1e-9 {
                    return Err(Error::Data(format!("codes {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn vocab(&self) -> usize {
        self.entries.rows()
    }

    pub fn width(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn code(&self, index: usize) -> Result<&[f64]> {
        if index >= self.vocab() {
            return Err(Error::Index {
                index,
                extent: self.vocab(),
            });
        }
        Ok(self.entries.row(index))
    }

    /// Index of the nearest code in squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, feature: &[f64]) -> Result<usize> {
        if feature.len() != self.width() {
            return Err(Error::shape("nearest", &[feature.len()], &[self.width()]));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature".into()));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.vocab() {
            let d = sq_dist(self.entries.row(i), feature);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        Ok(best)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.vocab() as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        for v in self.entries.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let vocab = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(vocab * width);
        for _ in 0..vocab * width {
            data.push(read_f32(&mut r)? as f64);
        }
        Self::new(Tensor::matrix(vocab, width, data)?)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Token-grid sides, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleHierarchy {
    resolutions: Vec<usize>,
}

impl ScaleHierarchy {
    pub fn new(resolutions: Vec<usize>) -> Result<Self> {
        if resolutions.is_empty() || resolutions[0] == 0 {
            return Err(Error::Spec("hierarchy needs resolutions starting at ≥ 1".into()));
        }
        if resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec(format!(
                "resolutions must increase strictly: {resolutions:?}"
            )));
        }
        Ok(Self { resolutions })
    }

    /// `n_k = base^(k-1)` for `k = 1..=scales`.
    pub fn geometric(base: usize, scales: usize) -> Result<Self> {
        if base < 2 {
            return Err(Error::Spec("geometric base must be at least 2".into()));
        }
        Self::new((0..scales as u32).map(|k| base.pow(k)).collect())
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }

    pub fn side(&self, scale: usize) -> usize {
        self.resolutions[scale]
    }

    pub fn finest(&self) -> usize {
        *self.resolutions.last().expect("non-empty")
    }

    pub fn tokens_at(&self, scale: usize) -> usize {
        self.resolutions[scale] * self.resolutions[scale]
    }

    /// Length of the concatenated sequence over all scales.
    pub fn total_tokens(&self) -> usize {
        self.resolutions.iter().map(|n| n * n).sum()
    }

    /// Position of the first token of `scale` in the concatenated sequence.
    pub fn offset(&self, scale: usize) -> usize {
        self.resolutions[..scale].iter().map(|n| n * n).sum()
    }

    /// Scale index of every position of the concatenated sequence.
    pub fn scale_of_positions(&self) -> Vec<usize> {
        self.resolutions
            .iter()
            .enumerate()
            .flat_map(|(k, n)| std::iter::repeat(k).take(n * n))
            .collect()
    }

    /// The first `scales` resolutions.
    pub fn truncated(&self, scales: usize) -> Result<Self> {
        Self::new(self.resolutions[..scales.min(self.len())].to_vec())
    }
}

/// Square grid of code indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    side: usize,
    indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != side * side {
            return Err(Error::shape("token grid", &[side, side], &[indices.len()]));
        }
        Ok(Self { side, indices })
    }

    pub fn filled(side: usize, index: usize) -> Self {
        Self {
            side,
            indices: vec![index; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn indices_mut(&mut self) -> &mut [usize] {
        &mut self.indices
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.indices[row * self.side + col]
    }

    /// Nested rows, for JSON output.
    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        self.indices.chunks(self.side.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// One token grid per scale, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHierarchy {
    grids: Vec<TokenGrid>,
}

impl TokenHierarchy {
    pub fn new(grids: Vec<TokenGrid>) -> Self {
        Self { grids }
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    pub fn grid(&self, scale: usize) -> &TokenGrid {
        &self.grids[scale]
    }

    pub fn grid_mut(&mut self, scale: usize) -> &mut TokenGrid {
        &mut self.grids[scale]
    }

    pub fn push(&mut self, grid: TokenGrid) {
        self.grids.push(grid);
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Checks grid count, sides, and index range against a hierarchy.
    pub fn validate(&self, hierarchy: &ScaleHierarchy, vocab: usize) -> Result<()> {
        if self.grids.len() != hierarchy.len() {
            return Err(Error::Spec(format!(
                "expected {} grids, got {}",
                hierarchy.len(),
                self.grids.len()
            )));
        }
        for (k, g) in self.grids.iter().enumerate() {
            if g.side != hierarchy.side(k) {
                return Err(Error::shape("token hierarchy", &[g.side], &[hierarchy.side(k)]));
            }
            if let Some(&bad) = g.indices.iter().find(|&&i| i >= vocab) {
                return Err(Error::Index {
                    index: bad,
                    extent: vocab,
                });
            }
        }
        Ok(())
    }

    /// All indices concatenated coarse to fine.
    pub fn flatten(&self) -> Vec<usize> {
        self.grids.iter().flat_map(|g| g.indices.iter().copied()).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.grids
                .iter()
                .map(|g| serde_json::json!(g.to_rows()))
                .collect(),
        )
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let rows: Vec<Vec<Vec<usize>>> = serde_json::from_value(value.clone())?;
        let grids = rows
            .into_iter()
            .map(|g| {
                let side = g.len();
                if g.iter().any(|r| r.len() != side) {
                    return Err(Error::Format("token grid is not square".into()));
                }
                TokenGrid::new(side, g.into_iter().flatten().collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { grids })
    }
}

/// `side × side × width` latent feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    side: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentMap {
    pub fn new(side: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * width {
            return Err(Error::shape("latent", &[side, side, width], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("latent has non-finite values".into()));
        }
        Ok(Self { side, width, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.side + col) * self.width;
        &self.data[o..o + self.width]
    }

    /// Cells as rows of a `side²×width` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.side * self.side, self.width], self.data.clone())
    }
}

/// Linear patch encoder/decoder pair.
///
/// The encoder maps each `patch×patch×channels` block (flattened row-major,
/// channels innermost) to one latent cell; the decoder maps a cell back.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodec {
    patch: usize,
    channels: usize,
    encoder: Tensor,
    encoder_bias: Tensor,
    decoder: Tensor,
    decoder_bias: Tensor,
}

impl PatchCodec {
    pub fn new(
        patch: usize,
        channels: usize,
        encoder: Tensor,
        encoder_bias: Tensor,
        decoder: Tensor,
        decoder_bias: Tensor,
    ) -> Result<Self> {
        let pd = patch * patch * channels;
        let width = encoder.cols();
        if patch == 0
            || encoder.shape() != [pd, width]
            || encoder_bias.numel() != width
            || decoder.shape() != [width, pd]
            || decoder_bias.numel() != pd
        {
            return Err(Error::shape("patch codec", encoder.shape(), decoder.shape()));
        }
        Ok(Self {
            patch,
            channels,
            encoder,
            encoder_bias,
            decoder,
            decoder_bias,
        })
    }

    /// Encoder with orthonormal columns and the decoder that inverts it on
    /// the latent space. `width` must not exceed `patch²·channels`.
    pub fn orthonormal(patch: usize, channels: usize, width: usize, seed: u64) -> Result<Self> {
        let pd = patch * patch * channels;
        if width == 0 || width > pd {
            return Err(Error::Spec(format!(
                "latent width {width} must be in 1..={pd}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gram-Schmidt on random gaussian-ish columns.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(width);
        while cols.len() < width {
            let mut v: Vec<f64> = (0..pd).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                cols.push(v);
            }
        }
        let mut enc = vec![0.0; pd * width];
        let mut dec = vec![0.0; width * pd];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                enc[i * width + j] = v;
                dec[j * pd + i] = v;
            }
        }
        Self::new(
            patch,
            channels,
            Tensor::matrix(pd, width, enc)?,
            Tensor::zeros(&[width]),
            Tensor::matrix(width, pd, dec)?,
            Tensor::zeros(&[pd]),
        )
    }

    /// Lowest-frequency orthonormal 2-D DCT-II basis functions, ordered by
    /// total frequency and then channel. The first column is the patch mean
    /// direction, so patch averages survive encoding.
    pub fn dct(patch: usize, channels: usize, width: usize) -> Result<Self> {
        let pd = patch * patch * channels;
        if width == 0 || width > pd {
            return Err(Error::Spec(format!(
                "latent width {width} must be in 1..={pd}"
            )));
        }
        let p = patch as f64;
        let basis = |f: usize, i: usize| {
            let a = if f == 0 { (1.0 / p).sqrt() } else { (2.0 / p).sqrt() };
            a * (std::f64::consts::PI * (i as f64 + 0.5) * f as f64 / p).cos()
        };
        let mut freqs: Vec<(usize, usize, usize)> = (0..patch)
            .flat_map(|u| (0..patch).flat_map(move |v| (0..channels).map(move |c| (u, v, c))))
            .collect();
        freqs.sort_by_key(|&(u, v, c)| (u + v, c, u));
        let mut enc = vec![0.0; pd * width];
        let mut dec = vec![0.0; width * pd];
        for (j, &(u, v, c)) in freqs.iter().take(width).enumerate() {
            for y in 0..patch {
                for x in 0..patch {
                    let i = (y * patch + x) * channels + c;
                    let val = basis(u, y) * basis(v, x);
                    enc[i * width + j] = val;
                    dec[j * pd + i] = val;
                }
            }
        }
        Self::new(
            patch,
            channels,
            Tensor::matrix(pd, width, enc)?,
            Tensor::zeros(&[width]),
            Tensor::matrix(width, pd, dec)?,
            Tensor::zeros(&[pd]),
        )
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.encoder.cols()
    }

    pub fn encoder(&self) -> &Tensor {
        &self.encoder
    }

    pub fn encoder_bias(&self) -> &Tensor {
        &self.encoder_bias
    }

    pub fn decoder(&self) -> &Tensor {
        &self.decoder
    }

    pub fn decoder_bias(&self) -> &Tensor {
        &self.decoder_bias
    }

    /// Flattens an image into a `patches × patch_dim` matrix, row-major over
    /// patch positions.
    pub fn patch_matrix(&self, image: &Image) -> Result<(usize, Tensor)> {
        let p = self.patch;
        if image.channels() != self.channels
            || image.height() % p != 0
            || image.width() % p != 0
            || image.height() != image.width()
        {
            return Err(Error::shape(
                "encode",
                &[image.height(), image.width(), image.channels()],
                &[p, p, self.channels],
            ));
        }
        let side = image.height() / p;
        let pd = p * p * self.channels;
        let mut data = Vec::with_capacity(side * side * pd);
        for pr in 0..side {
            for pc in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..self.channels {
                            data.push(image.get(pr * p + y, pc * p + x, c));
                        }
                    }
                }
            }
        }
        Ok((side, Tensor::matrix(side * side, pd, data)?))
    }

    pub fn encode(&self, image: &Image) -> Result<LatentMap> {
        let (side, patches) = self.patch_matrix(image)?;
        let mut out = Vec::with_capacity(side * side * self.width());
        let z = crate::tensor::kernels::matmul(
            patches.data(),
            self.encoder.data(),
            side * side,
            patches.cols(),
            self.width(),
        );
        for row in z.chunks(self.width()) {
            out.extend(row.iter().zip(self.encoder_bias.data()).map(|(a, b)| a + b));
        }
        LatentMap::new(side, self.width(), out)
    }

    /// Linear un-patching of a latent map.
    pub fn decode_latent(&self, latent: &LatentMap) -> Result<Image> {
        if latent.width() != self.width() {
            return Err(Error::shape("decode", &[latent.width()], &[self.width()]));
        }
        let p = self.patch;
        let side = latent.side();
        let pd = p * p * self.channels;
        let pix = crate::tensor::kernels::matmul(
            latent.data(),
            self.decoder.data(),
            side * side,
            self.width(),
            pd,
        );
        let mut image = Image::zeros(side * p, side * p, self.channels);
        for pr in 0..side {
            for pc in 0..side {
                let cell = &pix[(pr * side + pc) * pd..(pr * side + pc + 1) * pd];
                let mut i = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..self.channels {
                            image.set(
                                pr * p + y,
                                pc * p + x,
                                c,
                                cell[i] + self.decoder_bias.data()[i],
                            );
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(image)
    }
}

/// Area-average resampling of a latent map to `target × target` cells.
///
/// Each output cell is the overlap-weighted mean of the input cells its
/// footprint covers, so constant maps stay constant.
pub fn area_resample(latent: &LatentMap, target: usize) -> Result<LatentMap> {
    let src = latent.side();
    if target == 0 || target > src {
        return Err(Error::Range(format!(
            "cannot area-average {src}×{src} to {target}×{target}"
        )));
    }
    if target == src {
        return Ok(latent.clone());
    }
    let w = latent.width();
    let weights = area_weights(src, target);
    let mut out = vec![0.0; target * target * w];
    for (oy, wy) in weights.iter().enumerate() {
        for (ox, wx) in weights.iter().enumerate() {
            let o = &mut out[(oy * target + ox) * w..(oy * target + ox + 1) * w];
            for &(iy, ay) in wy {
                for &(ix, ax) in wx {
                    let a = ay * ax;
                    for (acc, v) in o.iter_mut().zip(latent.cell(iy, ix)) {
                        *acc += a * v;
                    }
                }
            }
        }
    }
    LatentMap::new(target, w, out)
}

/// For each output index, the `(input index, weight)` pairs of a 1-D box
/// filter; weights sum to one.
fn area_weights(src: usize, target: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / target as f64;
    (0..target)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            let mut ws = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / ratio));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// The latent map at `scale` of `hierarchy`; the finest scale is returned
/// unchanged.
pub fn interp_to_scale(
    latent: &LatentMap,
    hierarchy: &ScaleHierarchy,
    scale: usize,
) -> Result<LatentMap> {
    if scale >= hierarchy.len() {
        return Err(Error::Range(format!(
            "scale {scale} outside hierarchy of {} scales",
            hierarchy.len()
        )));
    }
    if latent.side() != hierarchy.finest() {
        return Err(Error::shape("interp", &[latent.side()], &[hierarchy.finest()]));
    }
    area_resample(latent, hierarchy.side(scale))
}

pub fn quantize_scale(features: &LatentMap, book: &CodeBook) -> Result<TokenGrid> {
    if features.width() != book.width() {
        return Err(Error::shape("quantize", &[features.width()], &[book.width()]));
    }
    let n = features.side();
    let indices = (0..n * n)
        .map(|i| book.nearest(features.cell(i / n, i % n)))
        .collect::<Result<_>>()?;
    TokenGrid::new(n, indices)
}

/// Frozen tokenizer: patch codec, code book, and the scale layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub codec: PatchCodec,
    pub book: CodeBook,
    pub hierarchy: ScaleHierarchy,
}

impl Tokenizer {
    pub fn new(codec: PatchCodec, book: CodeBook, hierarchy: ScaleHierarchy) -> Result<Self> {
        if codec.width() != book.width() {
            return Err(Error::shape("tokenizer", &[codec.width()], &[book.width()]));
        }
        Ok(Self {
            codec,
            book,
            hierarchy,
        })
    }

    /// Copy with every stored value rounded to `f32`, the precision
    /// checkpoints keep.
    pub fn round_to_f32(&self) -> Result<Self> {
        let c = &self.codec;
        let codec = PatchCodec::new(
            c.patch,
            c.channels,
            c.encoder.round_to_f32(),
            c.encoder_bias.round_to_f32(),
            c.decoder.round_to_f32(),
            c.decoder_bias.round_to_f32(),
        )?;
        let book = CodeBook::new(self.book.entries().round_to_f32())?;
        Self::new(codec, book, self.hierarchy.clone())
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenHierarchy> {
        let latent = self.codec.encode(image)?;
        if latent.side() != self.hierarchy.finest() {
            return Err(Error::shape(
                "tokenize",
                &[latent.side()],
                &[self.hierarchy.finest()],
            ));
        }
        let grids = (0..self.hierarchy.len())
            .map(|k| quantize_scale(&interp_to_scale(&latent, &self.hierarchy, k)?, &self.book))
            .collect::<Result<_>>()?;
        Ok(TokenHierarchy::new(grids))
    }

    /// Looks up the finest grid's codes and un-patches them.
    pub fn decode(&self, tokens: &TokenHierarchy) -> Result<Image> {
        let finest = tokens
            .grids()
            .last()
            .ok_or_else(|| Error::Spec("empty token hierarchy".into()))?;
        let mut data = Vec::with_capacity(finest.indices().len() * self.book.width());
        for &i in finest.indices() {
            data.extend_from_slice(self.book.code(i)?);
        }
        self.codec
            .decode_latent(&LatentMap::new(finest.side(), self.book.width(), data)?)
    }
}

/// k-means with k-means++ seeding and a fixed iteration cap.
///
/// `samples` is `count × width`. Empty clusters keep their previous centroid.
pub fn build_codebook(samples: &Tensor, vocab: usize, seed: u64) -> Result<CodeBook> {
    let n = samples.rows();
    let w = samples.cols();
    if n < vocab {
        return Err(Error::Data(format!(
            "{n} samples cannot seed {vocab} codes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    let first = rng.gen_range(0..n);
    centroids.push(samples.row(first).to_vec());
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(samples.row(i), &centroids[0]))
        .collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    while centroids.len() < vocab {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // Everything left coincides with a centroid: take any unchosen sample.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            *free.choose(&mut rng).expect("n ≥ vocab")
        };
        chosen[pick] = true;
        centroids.push(samples.row(pick).to_vec());
        let c = centroids.last().expect("just pushed");
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(samples.row(i), c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = samples.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(x, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; w]; vocab];
        let mut counts = vec![0usize; vocab];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(samples.row(i)).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            if cnt > 0 {
                *c = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
    }
    CodeBook::new(Tensor::matrix(
        vocab,
        w,
        centroids.into_iter().flatten().collect(),
    )?)
}
