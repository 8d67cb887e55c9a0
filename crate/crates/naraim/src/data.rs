//! Dataset ingestion (manifest plus PPM/PGM/PNG decoding) and the
//! synthetic circle/ellipse benchmark generator.
//!
//! The synthetic set exists to probe aspect-ratio handling: class 0 draws a
//! circle, class 1 an ellipse with axis ratio 1.5, on images whose aspect
//! ratio is log-uniform in a wide range. Squashing a non-square image into
//! a square turns circles into ellipses, destroying the class cue by
//! construction, while an aspect-preserving pipeline keeps it intact.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::{stream, Rng};

/// One dataset record: image path relative to the manifest root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// A labeled image list: `#classes=C` header, then `path<TAB>label` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse and validate a manifest file. Labels must be in range and
    /// every referenced image must exist; decoding stays lazy.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut classes = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#classes=") {
                if classes.is_some() {
                    return Err(Error::data(format!(
                        "line {}: duplicate #classes header",
                        lineno + 1
                    )));
                }
                let c: usize = rest.trim().parse().map_err(|_| {
                    Error::data(format!("line {}: bad class count {rest:?}", lineno + 1))
                })?;
                if c == 0 {
                    return Err(Error::data("class count must be at least 1"));
                }
                classes = Some(c);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let classes = classes.ok_or_else(|| {
                Error::data("manifest must start with a #classes=C header")
            })?;
            let (rel, label_text) = line.split_once('\t').ok_or_else(|| {
                Error::data(format!(
                    "line {}: expected path<TAB>label, got {line:?}",
                    lineno + 1
                ))
            })?;
            let index = entries.len();
            let label: usize = label_text.trim().parse().map_err(|_| {
                Error::data(format!("entry {index}: bad label {label_text:?} ({rel})"))
            })?;
            if label >= classes {
                return Err(Error::data(format!(
                    "entry {index}: label {label} out of range for {classes} classes ({rel})"
                )));
            }
            let rel_path = PathBuf::from(rel);
            if !root.join(&rel_path).is_file() {
                return Err(Error::data(format!(
                    "entry {index}: image file {rel} not found under {}",
                    root.display()
                )));
            }
            entries.push(ManifestEntry {
                path: rel_path,
                label,
            });
        }
        let classes = classes.ok_or_else(|| {
            Error::data("manifest must start with a #classes=C header")
        })?;
        if entries.is_empty() {
            return Err(Error::data("empty dataset"));
        }
        Ok(DatasetManifest {
            root,
            classes,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decode the image behind one entry.
    pub fn load_image(&self, index: usize) -> Result<Image> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::contract(format!(
                "entry {index} out of range for {} entries",
                self.entries.len()
            ))
        })?;
        decode_image(&self.root.join(&entry.path))
            .map_err(|e| Error::data(format!("entry {index}: {e}")))
    }

    /// Decode everything into parallel image/label vectors.
    pub fn load_all(&self) -> Result<(Vec<Image>, Vec<usize>)> {
        let mut images = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            images.push(self.load_image(i)?);
            labels.push(self.entries[i].label);
        }
        Ok((images, labels))
    }
}

/// Serialize as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(y, x, c) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Decode PPM (P6), PGM (P5), or PNG by content sniffing.
pub fn decode_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(&bytes, path)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path)
    } else {
        Err(Error::data(format!(
            "{}: unrecognized image format",
            path.display()
        )))
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Binary PNM parsing: magic, width, height, maxval tokens (with `#`
/// comments), one whitespace byte, then raw samples.
fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => unreachable!("caller sniffed the magic"),
    };
    let mut pos = 2;
    let mut next_token = |pos: &mut usize| -> Result<usize> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header token"))
    };
    let w = next_token(&mut pos)?;
    let h = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, expected 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let expected = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(bad(&format!(
            "truncated pixel data: {} of {expected} bytes",
            data.len()
        )));
    }
    let mut px = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        if channels == 3 {
            for c in 0..3 {
                px.push(data[i * 3 + c] as f64 / 255.0);
            }
        } else {
            let g = data[i] as f64 / 255.0;
            px.extend_from_slice(&[g, g, g]);
        }
    }
    Image::new(h, w, px).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Parameters of the synthetic circle/ellipse benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Target pixel count per image; dims follow the sampled aspect ratio.
    pub area: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 100,
            classes: 2,
            ratio_lo: 0.25,
            ratio_hi: 4.0,
            area: 280.0 * 280.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("synthetic set needs n > 0"));
        }
        if self.classes != 2 {
            return Err(Error::config(
                "the synthetic benchmark defines exactly 2 classes",
            ));
        }
        if !(self.ratio_lo > 0.0 && self.ratio_lo <= self.ratio_hi) {
            return Err(Error::config(format!(
                "ratio range [{}, {}] is invalid",
                self.ratio_lo, self.ratio_hi
            )));
        }
        // The most extreme ratio must still leave room for the shape.
        let worst = self.ratio_hi.max(1.0 / self.ratio_lo);
        if (self.area / worst).sqrt() < 24.0 {
            return Err(Error::config(
                "area too small for the ratio range; shapes would not fit",
            ));
        }
        Ok(())
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Render image `index` of the benchmark; deterministic in (seed, index).
/// Even indices are class 0 (circle), odd are class 1 (ellipse, axis ratio
/// 1.5, randomly portrait or landscape). Shapes are dark on a light
/// textured background so their extent is measurable after resizing.
pub fn synth_image(spec: &SynthSpec, index: usize) -> Result<(Image, usize)> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, &[stream::SYNTH, index as u64]);
    let label = index % spec.classes;
    let ratio = rng
        .uniform_range(spec.ratio_lo.ln(), spec.ratio_hi.ln())
        .exp();
    let h = ((spec.area / ratio).sqrt().round() as usize).max(16);
    let w = ((spec.area * ratio).sqrt().round() as usize).max(16);

    let light = |rng: &mut Rng| {
        [
            rng.uniform_range(0.55, 0.95),
            rng.uniform_range(0.55, 0.95),
            rng.uniform_range(0.55, 0.95),
        ]
    };
    let bg_a = light(&mut rng);
    let bg_b = light(&mut rng);
    let grad_mix = rng.uniform();
    let band_freq = rng.uniform_range(2.0, 7.0);
    let band_phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let band_amp = rng.uniform_range(0.0, 0.06);

    let min_dim = h.min(w) as f64;
    let base_r = min_dim * rng.uniform_range(0.16, 0.26);
    let stretch = 1.5f64.sqrt();
    let (ax, ay) = match (label, rng.bernoulli(0.5)) {
        (0, _) => (base_r, base_r),
        (_, true) => (base_r * stretch, base_r / stretch),
        (_, false) => (base_r / stretch, base_r * stretch),
    };
    // Keep a far-edge margin: the native pipeline crops up to a patch's
    // worth of pixels from the right and bottom, and the shape must survive
    // whole for the class cue to be well defined.
    let cx = rng.uniform_range(ax + 2.0, 0.88 * w as f64 - ax - 2.0);
    let cy = rng.uniform_range(ay + 2.0, 0.88 * h as f64 - ay - 2.0);
    let shape = [
        rng.uniform_range(0.02, 0.30),
        rng.uniform_range(0.02, 0.30),
        rng.uniform_range(0.02, 0.30),
    ];

    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            let t = fx * grad_mix + fy * (1.0 - grad_mix);
            let mut col = mix(bg_a, bg_b, t);
            let band =
                band_amp * (band_freq * std::f64::consts::TAU * (fx + fy) / 2.0 + band_phase).sin();
            for c in &mut col {
                *c += band;
            }
            // Signed distance (approximate) to the ellipse boundary gives a
            // one-pixel antialiased edge.
            let qx = (x as f64 + 0.5 - cx) / ax;
            let qy = (y as f64 + 0.5 - cy) / ay;
            let q = (qx * qx + qy * qy).sqrt();
            let dist = (q - 1.0) * ax.min(ay);
            let cov = (0.5 - dist).clamp(0.0, 1.0);
            for (c, s) in col.iter_mut().zip(shape) {
                *c = (*c * (1.0 - cov) + s * cov).clamp(0.0, 1.0);
            }
            px.extend_from_slice(&col);
        }
    }
    Ok((Image::new(h, w, px)?, label))
}

/// Write the benchmark to disk: `images/img#####.ppm` plus `manifest.txt`.
/// Returns the manifest path. Byte-identical for identical specs.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = format!("#classes={}\n", spec.classes);
    for i in 0..spec.n {
        let (img, label) = synth_image(spec, i)?;
        let rel = format!("images/img{i:05}.ppm");
        write_ppm(&img, &out_dir.join(&rel))?;
        manifest.push_str(&format!("{rel}\t{label}\n"));
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{aim_eval_resize, bilinear_resize, native_aspect_ratio_resize, PipelineConfig};

    fn checker_image(h: usize, w: usize) -> Image {
        // All values sit exactly on the k/255 lattice so encode/decode is
        // lossless.
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let a = (((x + y) % 2) * 200 + 10) as f64 / 255.0;
                let b = ((x % 3) * 50) as f64 / 255.0;
                let c = (245 - ((x + y) % 2) * 200) as f64 / 255.0;
                px.extend_from_slice(&[a, b, c]);
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn ppm_round_trips_exactly_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        // Values on the k/255 lattice survive encode/decode exactly.
        let mut px = Vec::new();
        for k in 0..(4 * 5 * 3) {
            px.push((k * 7 % 256) as f64 / 255.0);
        }
        let img = Image::new(4, 5, px).unwrap();
        let path = dir.path().join("t.ppm");
        write_ppm(&img, &path).unwrap();
        let back = decode_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_decodes_as_replicated_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        fs::write(&path, [b"P5\n2 1\n255\n".as_slice(), &[0u8, 255u8]].concat()).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img.height(), 1);
        assert_eq!(img.width(), 2);
        for c in 0..3 {
            assert_eq!(img.get(0, 0, c), 0.0);
            assert_eq!(img.get(0, 1, c), 1.0);
        }
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 # inline\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        fs::write(&path, bytes).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 1), 1.0);
    }

    #[test]
    fn truncated_ppm_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[7u8; 10]);
        fs::write(&path, bytes).unwrap();
        let err = decode_image(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = checker_image(6, 9);
        let mut rgb = image::RgbImage::new(9, 6);
        for y in 0..6 {
            for x in 0..9 {
                let p = [
                    (img.get(y, x, 0) * 255.0).round() as u8,
                    (img.get(y, x, 1) * 255.0).round() as u8,
                    (img.get(y, x, 2) * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(p));
            }
        }
        rgb.save(&path).unwrap();
        let back = decode_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn unknown_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"not an image at all").unwrap();
        assert!(matches!(decode_image(&path), Err(Error::Data(_))));
    }

    fn write_fixture_manifest(dir: &Path) -> PathBuf {
        fs::create_dir_all(dir.join("img")).unwrap();
        write_ppm(&checker_image(8, 6), &dir.join("img/a.ppm")).unwrap();
        write_ppm(&checker_image(5, 10), &dir.join("img/b.ppm")).unwrap();
        write_ppm(&checker_image(7, 7), &dir.join("img/c.ppm")).unwrap();
        let path = dir.join("manifest.txt");
        fs::write(
            &path,
            "#classes=3\n# fixture set\nimg/a.ppm\t0\nimg/b.ppm\t2\nimg/c.ppm\t1\n",
        )
        .unwrap();
        path
    }

    #[test]
    fn manifest_loads_and_decodes_lazily() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture_manifest(dir.path());
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.classes, 3);
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[1].label, 2);
        let img = m.load_image(1).unwrap();
        assert_eq!((img.height(), img.width()), (5, 10));
        let (images, labels) = m.load_all().unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(labels, vec![0, 2, 1]);
    }

    #[test]
    fn manifest_with_no_entries_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "#classes=2\n").unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
    }

    #[test]
    fn out_of_range_label_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("img")).unwrap();
        write_ppm(&checker_image(4, 4), &dir.path().join("img/a.ppm")).unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "#classes=2\nimg/a.ppm\t0\nimg/a.ppm\t2\n").unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("entry 1"), "got: {msg}");
        assert!(msg.contains("label 2"), "got: {msg}");
    }

    #[test]
    fn missing_image_file_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "#classes=2\nnope.ppm\t0\n").unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("entry 0") && msg.contains("nope.ppm"), "got: {msg}");
    }

    #[test]
    fn synthetic_generation_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n: 6,
            seed: 11,
            ..SynthSpec::default()
        };
        let m1 = generate_synthetic(&spec, &dir.path().join("a")).unwrap();
        let m2 = generate_synthetic(&spec, &dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        for i in 0..6 {
            let rel = format!("images/img{i:05}.ppm");
            let a = fs::read(dir.path().join("a").join(&rel)).unwrap();
            let b = fs::read(dir.path().join("b").join(&rel)).unwrap();
            assert_eq!(a, b, "image {i} differs");
        }
        // And the result is a loadable dataset with balanced labels.
        let m = DatasetManifest::load(&m1).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.entries.iter().filter(|e| e.label == 0).count(), 3);
    }

    /// Bounding-box width/height of dark pixels (the rendered shape);
    /// None when cropping removed the shape entirely.
    fn shape_bbox_ratio(img: &Image) -> Option<f64> {
        let (mut top, mut bot, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let lum = (img.get(y, x, 0) + img.get(y, x, 1) + img.get(y, x, 2)) / 3.0;
                if lum < 0.45 {
                    top = top.min(y);
                    bot = bot.max(y);
                    left = left.min(x);
                    right = right.max(x);
                }
            }
        }
        (top < usize::MAX).then(|| (right - left + 1) as f64 / (bot - top + 1) as f64)
    }

    #[test]
    fn circles_stay_round_under_native_resize() {
        let cfg = PipelineConfig::new(4096, 8).unwrap();
        let spec = SynthSpec { n: 10, seed: 3, ..SynthSpec::default() };
        for i in (0..10).step_by(2) {
            let (img, label) = synth_image(&spec, i).unwrap();
            assert_eq!(label, 0);
            let resized = native_aspect_ratio_resize(&img, &cfg).unwrap();
            let ratio = shape_bbox_ratio(&resized).unwrap();
            assert!(
                (ratio - 1.0).abs() <= 0.1,
                "image {i}: circle ratio {ratio} after native resize"
            );
        }
    }

    #[test]
    fn ellipses_are_drawn_elongated() {
        let spec = SynthSpec { n: 10, seed: 3, ..SynthSpec::default() };
        for i in (1..10).step_by(2) {
            let (img, label) = synth_image(&spec, i).unwrap();
            assert_eq!(label, 1);
            let r = shape_bbox_ratio(&img).unwrap();
            let elong = r.max(1.0 / r);
            assert!(
                (1.35..=1.65).contains(&elong),
                "image {i}: ellipse axis ratio {elong}"
            );
        }
    }

    #[test]
    fn square_stretch_distorts_circles_on_wide_images() {
        // Pin the aspect ratio to 2 so the distortion is predictable.
        let spec = SynthSpec {
            n: 2,
            seed: 5,
            ratio_lo: 2.0,
            ratio_hi: 2.0,
            ..SynthSpec::default()
        };
        let (img, label) = synth_image(&spec, 0).unwrap();
        assert_eq!(label, 0);
        assert!((img.width() as f64 / img.height() as f64 - 2.0).abs() < 0.05);
        // Forcing the whole image into a square halves the x extent, so the
        // circle renders with axis ratio near 1/2.
        let squared = bilinear_resize(&img, 64, 64);
        let ratio = shape_bbox_ratio(&squared).unwrap();
        assert!(
            (ratio - 0.5).abs() <= 0.12,
            "circle ratio {ratio} after square stretch"
        );
        // The aspect-preserving eval path (center crop, no stretch) keeps
        // whatever part of the circle survives round; it may also crop the
        // shape away entirely, which is the other way the cue dies.
        let cfg = PipelineConfig::new(4096, 8).unwrap();
        let cropped = aim_eval_resize(&img, &cfg);
        if let Some(r) = shape_bbox_ratio(&cropped) {
            assert!(r > 0.3, "unexpected degenerate bbox: {r}");
        }
    }
}
