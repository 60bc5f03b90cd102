//! Referents built from orthogonal features, their visual realizations as
//! MNIST digit compositions, and game contexts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffcore::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIGIT_SIDE: usize = 28;
pub const GRID_SIDE: usize = 4;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
pub const PERSPECTIVE_SIDE: usize = GRID_SIDE * DIGIT_SIDE;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// A non-empty set of features out of `m`, stored as a bit mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Referent {
    bits: u32,
    m: u8,
}

impl Referent {
    pub fn new(features: &[usize], m: usize) -> Result<Self> {
        if m == 0 || m > 16 {
            return Err(Error::InvalidInput(format!("feature count {m} out of range")));
        }
        let mut bits = 0u32;
        for &f in features {
            if f >= m {
                return Err(Error::InvalidInput(format!("feature {f} >= {m}")));
            }
            if bits & (1 << f) != 0 {
                return Err(Error::InvalidInput(format!("duplicate feature {f}")));
            }
            bits |= 1 << f;
        }
        if bits == 0 {
            return Err(Error::InvalidInput("a referent needs at least one feature".into()));
        }
        Ok(Referent { bits, m: m as u8 })
    }

    pub fn feature_count(&self) -> usize {
        self.m as usize
    }

    pub fn features(&self) -> Vec<usize> {
        (0..self.m as usize).filter(|f| self.contains(*f)).collect()
    }

    pub fn contains(&self, feature: usize) -> bool {
        feature < 32 && self.bits & (1 << feature) != 0
    }

    pub fn size(&self) -> usize {
        self.bits.count_ones() as usize
    }

    /// The sum of the one-hot feature vectors.
    pub fn vector(&self) -> Vec<f64> {
        (0..self.m as usize)
            .map(|f| if self.contains(f) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Features joined with '+', e.g. "1+3".
    pub fn label(&self) -> String {
        let names: Vec<String> = self.features().iter().map(|f| f.to_string()).collect();
        names.join("+")
    }
}

/// All referents with exactly `k` of `m` features, in lexicographic order of
/// their feature lists.
pub fn enumerate_referents(m: usize, k: usize) -> Result<Vec<Referent>> {
    if k == 0 || k > m || m > 16 {
        return Err(Error::InvalidInput(format!("cannot choose {k} of {m} features")));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(Referent::new(&idx, m)?);
        // advance to the next combination
        let mut i = k;
        while i > 0 && idx[i - 1] == m - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return Ok(out);
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Which MNIST split a store was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Digit images indexed by class. Read-only once loaded.
#[derive(Clone, Debug)]
pub struct DigitStore {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    by_class: Vec<Vec<usize>>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Parses an IDX payload, checking the magic number; returns dims and data.
fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Dataset(format!(
            "magic number {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Dataset(format!("truncated payload: need {len} bytes")))?;
    Ok((dims, payload))
}

/// Encodes 28×28 images in IDX3 format.
pub fn encode_idx_images(images: &[[u8; DIGIT_SIDE * DIGIT_SIDE]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * DIGIT_SIDE * DIGIT_SIDE);
    for v in [IMAGE_MAGIC, images.len() as u32, DIGIT_SIDE as u32, DIGIT_SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    images.iter().for_each(|img| out.extend_from_slice(img));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

impl DigitStore {
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let (idims, ipix) = parse_idx(images, IMAGE_MAGIC)?;
        let (ldims, lab) = parse_idx(labels, LABEL_MAGIC)?;
        if idims[1] != DIGIT_SIDE || idims[2] != DIGIT_SIDE {
            return Err(Error::Dataset(format!("images are {}x{}", idims[1], idims[2])));
        }
        if idims[0] != ldims[0] {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                idims[0], ldims[0]
            )));
        }
        let mut by_class = vec![Vec::new(); 10];
        for (i, &l) in lab.iter().enumerate() {
            let slot = by_class
                .get_mut(l as usize)
                .ok_or_else(|| Error::Dataset(format!("label {l} out of range")))?;
            slot.push(i);
        }
        Ok(DigitStore {
            pixels: ipix.to_vec(),
            labels: lab.to_vec(),
            by_class,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<u8>> {
            std::fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingDataset(p.to_path_buf()),
                _ => Error::Io(e),
            })
        };
        DigitStore::from_idx_bytes(&read(images)?, &read(labels)?)
    }

    /// Loads one split from a directory holding the standard uncompressed MNIST file names.
    pub fn load_mnist(dir: &Path, split: Split) -> Result<Self> {
        let (img, lab) = split.file_names();
        DigitStore::load(&dir.join(img), &dir.join(lab))
    }

    pub fn mnist_files(dir: &Path, split: Split) -> [PathBuf; 2] {
        let (img, lab) = split.file_names();
        [dir.join(img), dir.join(lab)]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.by_class.iter().filter(|c| !c.is_empty()).count()
    }

    pub fn instances(&self, class: u8) -> Result<&[usize]> {
        match self.by_class.get(class as usize) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::Dataset(format!("no instances of digit class {class}"))),
        }
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.pixels[index * DIGIT_SIDE * DIGIT_SIDE..(index + 1) * DIGIT_SIDE * DIGIT_SIDE]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub feature: usize,
    pub cell: usize,
    pub instance: usize,
}

/// One visual realization of an abstract referent.
#[derive(Clone, Debug, PartialEq)]
pub struct Perspective {
    pub referent: Referent,
    pub placements: Vec<Placement>,
    /// `[1, 112, 112]`, values in [0, 1].
    pub image: Tensor,
}

impl Perspective {
    pub fn recover_referent(&self) -> Result<Referent> {
        let features: Vec<usize> = self.placements.iter().map(|p| p.feature).collect();
        Referent::new(&features, self.referent.feature_count())
    }
}

/// Feature index to MNIST digit class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap(pub Vec<u8>);

impl FeatureMap {
    pub fn identity(m: usize) -> Self {
        FeatureMap((0..m as u8).collect())
    }

    pub fn class_of(&self, feature: usize) -> Result<u8> {
        self.0
            .get(feature)
            .copied()
            .ok_or_else(|| Error::Config(format!("feature {feature} has no digit class")))
    }
}

/// Draws one instance per feature and places the digits in distinct cells of the 4×4 grid.
pub fn sample_perspective(
    referent: Referent,
    store: &DigitStore,
    mapping: &FeatureMap,
    rng: &mut dyn RngCore,
) -> Result<Perspective> {
    let features = referent.features();
    if features.len() > GRID_CELLS {
        return Err(Error::InvalidInput(format!(
            "{} features do not fit a {GRID_SIDE}x{GRID_SIDE} grid",
            features.len()
        )));
    }
    let mut cells: Vec<usize> = (0..GRID_CELLS).collect();
    cells.shuffle(rng);
    let mut image = vec![0.0; PERSPECTIVE_SIDE * PERSPECTIVE_SIDE];
    let mut placements = Vec::with_capacity(features.len());
    for (&feature, &cell) in features.iter().zip(&cells) {
        let pool = store.instances(mapping.class_of(feature)?)?;
        let instance = pool[rng.gen_range(0..pool.len())];
        let (gr, gc) = (cell / GRID_SIDE, cell % GRID_SIDE);
        for (r, row) in store.image(instance).chunks_exact(DIGIT_SIDE).enumerate() {
            let base = (gr * DIGIT_SIDE + r) * PERSPECTIVE_SIDE + gc * DIGIT_SIDE;
            for (c, &v) in row.iter().enumerate() {
                image[base + c] = v as f64 / 255.0;
            }
        }
        placements.push(Placement {
            feature,
            cell,
            instance,
        });
    }
    Ok(Perspective {
        referent,
        placements,
        image: Tensor::new(vec![1, PERSPECTIVE_SIDE, PERSPECTIVE_SIDE], image)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferentMode {
    OneHot,
    VisualShared,
    VisualUnshared,
}

impl ReferentMode {
    pub fn is_visual(self) -> bool {
        !matches!(self, ReferentMode::OneHot)
    }

    pub fn name(self) -> &'static str {
        match self {
            ReferentMode::OneHot => "one-hot",
            ReferentMode::VisualShared => "visual-shared",
            ReferentMode::VisualUnshared => "visual-unshared",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ReferentMode::OneHot => 0,
            ReferentMode::VisualShared => 1,
            ReferentMode::VisualUnshared => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ReferentMode::OneHot),
            1 => Some(ReferentMode::VisualShared),
            2 => Some(ReferentMode::VisualUnshared),
            _ => None,
        }
    }
}

impl std::str::FromStr for ReferentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" => Ok(ReferentMode::OneHot),
            "visual-shared" => Ok(ReferentMode::VisualShared),
            "visual-unshared" => Ok(ReferentMode::VisualUnshared),
            other => Err(Error::Config(format!("unknown referent mode {other:?}"))),
        }
    }
}

/// How agents perceive abstract referents: as their feature vector, or as a
/// freshly sampled perspective image.
#[derive(Clone, Debug)]
pub enum Perceiver {
    OneHot { m: usize },
    Visual {
        store: Arc<DigitStore>,
        mapping: FeatureMap,
    },
}

impl Perceiver {
    /// Shape of a single view, without the batch axis.
    pub fn view_shape(&self) -> Vec<usize> {
        match self {
            Perceiver::OneHot { m } => vec![*m],
            Perceiver::Visual { .. } => vec![1, PERSPECTIVE_SIDE, PERSPECTIVE_SIDE],
        }
    }

    pub fn view(&self, referent: Referent, rng: &mut dyn RngCore) -> Result<Tensor> {
        Ok(self.perspective(referent, rng)?.1)
    }

    /// A view plus its placement record (empty in one-hot mode).
    pub fn perspective(
        &self,
        referent: Referent,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<Placement>, Tensor)> {
        match self {
            Perceiver::OneHot { m } => {
                if referent.feature_count() != *m {
                    return Err(Error::InvalidInput(format!(
                        "referent over {} features, perceiver expects {m}",
                        referent.feature_count()
                    )));
                }
                Ok((Vec::new(), Tensor::vector(referent.vector())))
            }
            Perceiver::Visual { store, mapping } => {
                let p = sample_perspective(referent, store, mapping, rng)?;
                Ok((p.placements, p.image))
            }
        }
    }
}

/// The referents of one round, as seen by the speaker and by the listener.
#[derive(Clone, Debug)]
pub struct Context {
    pub referents: Vec<Referent>,
    pub speaker_views: Vec<Tensor>,
    pub listener_views: Vec<Tensor>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.referents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.referents.is_empty()
    }

    pub fn position(&self, r: Referent) -> Option<usize> {
        self.referents.iter().position(|x| *x == r)
    }
}

pub fn make_context(
    referents: &[Referent],
    mode: ReferentMode,
    perceiver: &Perceiver,
    rng: &mut dyn RngCore,
) -> Result<Context> {
    for (i, r) in referents.iter().enumerate() {
        if referents[..i].contains(r) {
            return Err(Error::InvalidInput(format!("duplicate referent {}", r.label())));
        }
    }
    if mode.is_visual() != matches!(perceiver, Perceiver::Visual { .. }) {
        return Err(Error::Config(format!(
            "mode {} does not match the perceiver",
            mode.name()
        )));
    }
    let speaker_views = referents
        .iter()
        .map(|r| perceiver.view(*r, rng))
        .collect::<Result<Vec<_>>>()?;
    let listener_views = match mode {
        ReferentMode::VisualUnshared => referents
            .iter()
            .map(|r| perceiver.view(*r, rng))
            .collect::<Result<Vec<_>>>()?,
        _ => speaker_views.clone(),
    };
    Ok(Context {
        referents: referents.to_vec(),
        speaker_views,
        listener_views,
    })
}
