//! On-disk formats: binary PPM images, probe-triple manifests and bias
//! record tables.
//!
//! External probe sets (photographs arranged in triples) plug in through a
//! manifest CSV whose image paths are resolved relative to the manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::stimgen::{ProbeTriple, Stimulus};

// --- PPM ----------------------------------------------------------------------

/// Binary PPM (`P6`, maxval 255) with the minimal header `P6\n<w> <h>\n255\n`.
pub fn ppm_write(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn token(&mut self, what: &str) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Decode(format!("PPM header ends before {what}"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Decode(format!("PPM {what} is not ASCII")))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token(what)?;
        t.parse()
            .map_err(|_| Error::Decode(format!("PPM {what} {t:?} is not a number")))
    }
}

pub fn ppm_read(bytes: &[u8]) -> Result<RgbImage> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token("magic")?;
    if magic != "P6" {
        return Err(Error::Decode(format!("expected P6 magic, found {magic:?}")));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Decode(format!("PPM maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let payload = bytes.get(cur.pos + 1..).unwrap_or(&[]);
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Decode("PPM dimensions overflow".into()))?;
    if payload.len() < need {
        return Err(Error::Decode(format!(
            "PPM payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    RgbImage::new(width, height, payload[..need].to_vec())
}

pub fn read_ppm_file(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ppm_read(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

pub fn write_ppm_file(path: &Path, image: &RgbImage) -> Result<()> {
    std::fs::write(path, ppm_write(image)).map_err(|e| Error::io(path, e))
}

// --- triple manifests ---------------------------------------------------------

pub const MANIFEST_HEADER: [&str; 5] = ["triple_id", "probe", "shape_match", "color_match", "background_id"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode(format!("{}: {other:?}", path.display())),
    }
}

/// Load triples in file order. Loaded stimuli carry no spec.
pub fn load_manifest(path: &Path) -> Result<Vec<ProbeTriple>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Decode(format!(
            "{}: manifest header must be {}, found {}",
            path.display(),
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = BTreeSet::new();
    let mut triples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row_err = |msg: String| Error::Decode(format!("{} row {}: {msg}", path.display(), row + 1));
        let triple_id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("bad triple_id {:?}", &rec[0])))?;
        if !seen.insert(triple_id) {
            return Err(row_err(format!("duplicate triple_id {triple_id}")));
        }
        let background_id: usize = rec[4]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("triple {triple_id}: bad background_id {:?}", &rec[4])))?;
        let load = |col: usize| -> Result<Stimulus> {
            let p = base.join(rec[col].trim());
            let image = read_ppm_file(&p).map_err(|e| row_err(format!("triple {triple_id}: {e}")))?;
            Ok(Stimulus { spec: None, image })
        };
        triples.push(ProbeTriple {
            triple_id,
            background_id,
            probe: load(1)?,
            shape_match: load(2)?,
            color_match: load(3)?,
        });
    }
    Ok(triples)
}

/// Write triple images as PPM files next to a `manifest.csv` in `dir`.
/// Returns the manifest path.
pub fn write_manifest(dir: &Path, triples: &[ProbeTriple]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(&manifest, e))?;
    for t in triples {
        let mut names = Vec::with_capacity(3);
        for (role, stim) in [("probe", &t.probe), ("shape", &t.shape_match), ("color", &t.color_match)] {
            let name = format!("triple{:03}_{role}.ppm", t.triple_id);
            write_ppm_file(&dir.join(&name), &stim.image)?;
            names.push(name);
        }
        w.write_record([
            t.triple_id.to_string(),
            names[0].clone(),
            names[1].clone(),
            names[2].clone(),
            t.background_id.to_string(),
        ])
        .map_err(|e| csv_error(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

// --- bias records -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    /// Nearest-neighbor baseline over embedder features.
    Ib,
    /// Matching Network.
    Mn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ib => "IB",
            ModelKind::Mn => "MN",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IB" => Ok(ModelKind::Ib),
            "MN" => Ok(ModelKind::Mn),
            other => Err(Error::Decode(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasRecord {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub step: usize,
    pub dataset: String,
    pub bias: f64,
    pub accuracy: f64,
}

impl BiasRecord {
    pub fn key(&self) -> (ModelKind, u64, usize, &str) {
        (self.model_kind, self.seed, self.step, &self.dataset)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::Range(format!("bias {} outside [0, 1]", self.bias)));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Range(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        Ok(())
    }
}

pub const RECORDS_HEADER: [&str; 6] = ["model_kind", "seed", "step", "dataset", "bias", "accuracy"];

fn check_unique(records: &[BiasRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::Decode(format!(
                "duplicate record for {} seed {} step {} dataset {}",
                r.model_kind, r.seed, r.step, r.dataset
            )));
        }
    }
    Ok(())
}

/// CSV text for a record list. Floats use the shortest representation that
/// parses back to the same value.
pub fn records_to_csv(records: &[BiasRecord]) -> Result<String> {
    check_unique(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Decode(e.to_string());
    w.write_record(RECORDS_HEADER).map_err(wrap)?;
    for r in records {
        r.validate()?;
        w.write_record([
            r.model_kind.to_string(),
            r.seed.to_string(),
            r.step.to_string(),
            r.dataset.clone(),
            format!("{}", r.bias),
            format!("{}", r.accuracy),
        ])
        .map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of UTF-8 fields is UTF-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<BiasRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Decode(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != RECORDS_HEADER {
        return Err(Error::Decode(format!(
            "records header must be {}",
            RECORDS_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Decode(format!("row {}: {e}", row + 1)))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |name: &str| Error::Decode(format!("row {}: bad {name} {:?}", row + 1, field(RECORDS_HEADER.iter().position(|h| *h == name).unwrap())));
        let r = BiasRecord {
            model_kind: field(0).parse()?,
            seed: field(1).parse().map_err(|_| bad("seed"))?,
            step: field(2).parse().map_err(|_| bad("step"))?,
            dataset: field(3).to_string(),
            bias: field(4).parse().map_err(|_| bad("bias"))?,
            accuracy: field(5).parse().map_err(|_| bad("accuracy"))?,
        };
        r.validate()
            .map_err(|e| Error::Range(format!("row {}: {e}", row + 1)))?;
        out.push(r);
    }
    check_unique(&out)?;
    Ok(out)
}

pub fn records_write(path: &Path, records: &[BiasRecord]) -> Result<()> {
    let text = records_to_csv(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn records_read(path: &Path) -> Result<Vec<BiasRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text).map_err(|e| match e {
        Error::Range(m) => Error::Range(format!("{}: {m}", path.display())),
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimgen::{make_probe_triples, render_stimulus, StimConfig, StimulusSpec};
    use proptest::prelude::*;

    #[test]
    fn red_pixel_encoding() {
        let img = RgbImage::new(1, 1, vec![255, 0, 0]).unwrap();
        let bytes = ppm_write(&img);
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\x00\x00".to_vec());
        assert_eq!(ppm_read(&bytes).unwrap(), img);
    }

    #[test]
    fn stimulus_round_trip() {
        let s = render_stimulus(
            StimulusSpec {
                shape_id: 7,
                color_id: 1,
                background_id: 4,
                jitter_seed: 3,
            },
            32,
        )
        .unwrap();
        let bytes = ppm_write(&s.image);
        assert_eq!(ppm_write(&ppm_read(&bytes).unwrap()), bytes);
    }

    #[test]
    fn decode_errors() {
        assert!(ppm_read(b"P6\n2 1\n255\n\x01\x02\x03").is_err());
        assert!(ppm_read(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(ppm_read(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(ppm_read(b"P6\n1").is_err());
        assert!(ppm_read(b"P6\nx 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = ppm_read(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let triples = make_probe_triples(&StimConfig::default(), 50, 2).unwrap();
        let path = write_manifest(dir.path(), &triples).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 50);
        for (a, b) in triples.iter().zip(&loaded) {
            assert_eq!(a.triple_id, b.triple_id);
            assert_eq!(a.background_id, b.background_id);
            assert_eq!(a.probe.image, b.probe.image);
            assert_eq!(a.shape_match.image, b.shape_match.image);
            assert_eq!(a.color_match.image, b.color_match.image);
            assert!(b.probe.spec.is_none());
        }
    }

    #[test]
    fn header_only_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "triple_id,probe,shape_match,color_match,background_id\n").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_image_names_the_triple() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "triple_id,probe,shape_match,color_match,background_id\n17,a.ppm,b.ppm,c.ppm,0\n",
        )
        .unwrap();
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("triple 17"), "{msg}");
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(&dir.path().join("absent.csv")).is_err());
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "triple_id,probe,shape_match,background_id\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    fn record(i: usize) -> BiasRecord {
        BiasRecord {
            model_kind: if i % 2 == 0 { ModelKind::Ib } else { ModelKind::Mn },
            seed: (i / 7) as u64,
            step: i,
            dataset: "synthetic".into(),
            bias: (i as f64 * 0.1234567).fract(),
            accuracy: 1.0 / (i as f64 + 3.0),
        }
    }

    #[test]
    fn one_record_is_two_lines() {
        let text = records_to_csv(&[record(0)]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), "model_kind,seed,step,dataset,bias,accuracy");
    }

    #[test]
    fn thousand_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let recs: Vec<_> = (0..1000).map(record).collect();
        records_write(&path, &recs).unwrap();
        assert_eq!(records_read(&path).unwrap(), recs);
    }

    #[test]
    fn out_of_range_bias_is_rejected_on_read() {
        let text = "model_kind,seed,step,dataset,bias,accuracy\nIB,0,0,x,1.5,0.5\n";
        assert!(matches!(records_from_csv(text), Err(Error::Range(_))));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let text = "model_kind,seed,step,dataset,bias,accuracy\nIB,0,0,x,0.5,0.5\nIB,0,0,x,0.25,0.5\n";
        assert!(records_from_csv(text).is_err());
        assert!(records_to_csv(&[record(0), record(0)]).is_err());
    }

    proptest! {
        #[test]
        fn ppm_codec_is_lossless(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let img = RgbImage::new(w, h, pixels).unwrap();
            prop_assert_eq!(ppm_read(&ppm_write(&img)).unwrap(), img);
        }

        #[test]
        fn record_floats_round_trip(bias in 0.0f64..=1.0, acc in 0.0f64..=1.0, seed in any::<u64>(), name in "[a-z ,\"]{1,8}") {
            let r = BiasRecord { model_kind: ModelKind::Mn, seed, step: 3, dataset: name, bias, accuracy: acc };
            let back = records_from_csv(&records_to_csv(std::slice::from_ref(&r)).unwrap()).unwrap();
            prop_assert_eq!(back, vec![r]);
        }
    }
}
