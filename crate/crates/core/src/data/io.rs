//! On-disk formats.
//!
//! Images are binary netpbm files: `P5` (grayscale) or `P6` (RGB), header
//! `P5\n<width> <height>\n255\n` followed by `width·height` bytes (three per
//! pixel for `P6`, interleaved RGB), rows top to bottom.
//!
//! A dataset directory holds `images/NNNNNN.pgm` (or `.ppm`) and
//! `annotations.csv` with header `image,x,y,w,h`, one row per face. Images
//! without faces appear in `images.txt`, the list of every image in order.
//!
//! The WIDER FACE ground-truth layout is one block per image: the image path,
//! the face count, then one `x y w h [attributes…]` line per face. A count of
//! zero is followed by a single placeholder line. Detections are written in
//! the same block style with `x y w h score` lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::Sample;
use crate::detect::{BBox, Detection};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_pnm(path: &Path, s: &Sample) -> Result<()> {
    let (magic, body) = match s.channels {
        1 => ("P5", s.pixels.clone()),
        3 => {
            let plane = s.height * s.width;
            let mut body = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                body.extend((0..3).map(|c| s.pixels[c * plane + p]));
            }
            ("P6", body)
        }
        c => return Err(Error::config(format!("cannot store a {c}-channel image as netpbm"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a `P5`/`P6` file; boxes are left empty.
pub fn read_pnm(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // header: magic, width, height, maxval separated by whitespace; '#' comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            if i < bytes.len() && bytes[i] == b'\n' {
                line += 1;
            }
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err(path, line, "truncated netpbm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1; // single whitespace byte before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(parse_err(path, 1, format!("unsupported netpbm magic `{m}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("bad header number `{s}`")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(parse_err(path, line, format!("maxval {maxval} unsupported (need 255)")));
    }
    let plane = width * height;
    let raster = bytes
        .get(i..i + channels * plane)
        .ok_or_else(|| parse_err(path, line, "raster is truncated"))?;
    let mut pixels = vec![0u8; channels * plane];
    for p in 0..plane {
        for c in 0..channels {
            pixels[c * plane + p] = raster[p * channels + c];
        }
    }
    Ok(Sample {
        height,
        width,
        channels,
        pixels,
        boxes: Vec::new(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    image: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn image_name(index: usize, channels: usize) -> String {
    format!("{index:06}.{}", if channels == 3 { "ppm" } else { "pgm" })
}

/// Write samples as a dataset directory (see the module docs).
pub fn write_dataset(dir: &Path, samples: &[Sample], header: &str) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut names = String::new();
    for line in header.lines() {
        names.push_str(&format!("# {line}\n"));
    }
    let csv_path = dir.join("annotations.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i, s.channels);
        write_pnm(&images.join(&name), s)?;
        names.push_str(&name);
        names.push('\n');
        for b in &s.boxes {
            w.serialize(AnnotationRow {
                image: name.clone(),
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
            .map_err(|e| Error::io(&csv_path, e.into()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let list = dir.join("images.txt");
    fs::write(&list, names).map_err(|e| Error::io(&list, e))
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let list = dir.join("images.txt");
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let names: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    let mut samples = names
        .iter()
        .map(|n| read_pnm(&dir.join("images").join(n)))
        .collect::<Result<Vec<_>>>()?;
    let csv_path = dir.join("annotations.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    for (k, row) in r.deserialize::<AnnotationRow>().enumerate() {
        let row = row.map_err(|e| parse_err(&csv_path, k + 2, e.to_string()))?;
        let idx = names
            .iter()
            .position(|n| *n == row.image)
            .ok_or_else(|| parse_err(&csv_path, k + 2, format!("unknown image `{}`", row.image)))?;
        samples[idx].boxes.push(BBox::new(row.x, row.y, row.w, row.h));
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WiderImage {
    pub path: String,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WiderAnnotations {
    pub images: Vec<WiderImage>,
    /// Boxes with zero width or height that were dropped.
    pub skipped_zero_size: usize,
}

/// Parse a WIDER FACE ground-truth file. Fields after `x y w h` are ignored.
pub fn read_widerface_annotations(path: &Path) -> Result<WiderAnnotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_widerface(&text, path)
}

pub fn parse_widerface(text: &str, path: &Path) -> Result<WiderAnnotations> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut images = Vec::new();
    let mut skipped = 0;
    while let Some((_, name)) = lines.by_ref().find(|(_, l)| !l.is_empty()) {
        let (ln, count) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                text.lines().count() + 1,
                format!("missing face count after `{name}`"),
            )
        })?;
        let count: usize = count
            .parse()
            .map_err(|_| parse_err(path, ln, format!("face count `{count}` is not a non-negative integer")))?;
        let mut boxes = Vec::with_capacity(count);
        // a zero count is still followed by one placeholder line
        for _ in 0..count.max(1) {
            let (bl, line) = lines.next().ok_or_else(|| {
                parse_err(
                    path,
                    ln + 1 + boxes.len(),
                    format!("file ends inside the block of `{name}`"),
                )
            })?;
            if count == 0 {
                break;
            }
            let nums: Vec<f64> = line
                .split_whitespace()
                .take(4)
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| parse_err(path, bl, format!("bad box field `{t}`")))
                })
                .collect::<Result<_>>()?;
            if nums.len() < 4 {
                return Err(parse_err(path, bl, "box line needs x y w h"));
            }
            if nums[2] <= 0.0 || nums[3] <= 0.0 {
                skipped += 1;
                continue;
            }
            boxes.push(BBox::new(nums[0], nums[1], nums[2], nums[3]));
        }
        images.push(WiderImage {
            path: name.to_string(),
            boxes,
        });
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} zero-sized boxes", path.display());
    }
    Ok(WiderAnnotations {
        images,
        skipped_zero_size: skipped,
    })
}

/// Write detections in the block format, one block per `(path, detections)`.
pub fn write_detections(path: &Path, blocks: &[(String, Vec<Detection>)]) -> Result<()> {
    let mut out = String::new();
    for (name, dets) in blocks {
        out.push_str(name);
        out.push('\n');
        out.push_str(&format!("{}\n", dets.len()));
        for d in dets {
            let b = d.bbox;
            out.push_str(&format!("{:.3} {:.3} {:.3} {:.3} {:.6}\n", b.x, b.y, b.w, b.h, d.score));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a file written by [`write_detections`]; image ids follow block order.
pub fn read_detections(path: &Path) -> Result<Vec<(String, Vec<Detection>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut out = Vec::new();
    while let Some((_, name)) = lines.by_ref().find(|(_, l)| !l.is_empty()) {
        let image_id = out.len();
        let (ln, count) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing count after `{name}`")))?;
        let count: usize = count
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad count `{count}`")))?;
        let mut dets = Vec::with_capacity(count);
        for k in 0..count {
            let (bl, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, ln + k + 1, "truncated detection block"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| parse_err(path, bl, format!("bad number `{t}`")))
                })
                .collect::<Result<_>>()?;
            if v.len() != 5 {
                return Err(parse_err(path, bl, "detection line needs x y w h score"));
            }
            dets.push(Detection {
                image_id,
                bbox: BBox::new(v[0], v[1], v[2], v[3]),
                score: v[4],
            });
        }
        out.push((name.to_string(), dets));
    }
    Ok(out)
}

/// `dir/name`, creating `dir`.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{render_sample, SceneSpec};

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let mut s = render_sample(
                &SceneSpec {
                    channels,
                    height: 32,
                    width: 40,
                    max_size: 30.0,
                    ..SceneSpec::default()
                },
                1,
            );
            let p = dir.path().join("x.pnm");
            write_pnm(&p, &s).unwrap();
            s.boxes.clear();
            assert_eq!(read_pnm(&p).unwrap(), s);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            min_objects: 0,
            ..SceneSpec::default()
        };
        let samples: Vec<_> = (0..6).map(|i| render_sample(&spec, i)).collect();
        write_dataset(dir.path(), &samples, "test").unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn wider_blocks() {
        let text = "0--Parade/a.jpg\n2\n10 20 30 40 0 0 0 0 0 0 \n1 2 3 4 1 0 0 0 0 0 \n\
                    0--Parade/b.jpg\n0\n0 0 0 0 0 0 0 0 0 0 \n\
                    0--Parade/c.jpg\n2\n5 5 0 7 0 0 0 0 0 0 \n8 8 9 9 0 0 0 0 0 0 \n";
        let a = parse_widerface(text, Path::new("gt.txt")).unwrap();
        assert_eq!(a.images.len(), 3);
        assert_eq!(
            a.images[0].boxes,
            vec![BBox::new(10.0, 20.0, 30.0, 40.0), BBox::new(1.0, 2.0, 3.0, 4.0)]
        );
        assert!(a.images[1].boxes.is_empty());
        assert_eq!(a.images[2].boxes.len(), 1);
        assert_eq!(a.skipped_zero_size, 1);
    }

    #[test]
    fn wider_errors_carry_line_numbers() {
        let e = parse_widerface("a.jpg\nthree\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
        let e = parse_widerface("a.jpg\n2\n1 2 3 4\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e:?}");
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dets.txt");
        let blocks = vec![
            (
                "img0".to_string(),
                vec![Detection {
                    image_id: 0,
                    bbox: BBox::new(1.234567, 2.0, 30.5, 40.25),
                    score: 0.9,
                }],
            ),
            ("img1".to_string(), vec![]),
        ];
        write_detections(&p, &blocks).unwrap();
        let back = read_detections(&p).unwrap();
        assert_eq!(back.len(), 2);
        let (a, b) = (blocks[0].1[0].bbox, back[0].1[0].bbox);
        for (u, v) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h)] {
            assert!((u - v).abs() < 0.005);
        }
        assert!(back[1].1.is_empty());
    }
}
