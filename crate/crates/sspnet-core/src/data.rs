//! Dataset schema: annotation JSON, detection JSON lines, and the
//! fixed-size patch tiler used when ingesting large external images.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{Detection, GtBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    /// [x, y, w, h] in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn boxes_for(&self, image_id: u64) -> Vec<GtBox> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| {
                let mut g = GtBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
                g.ignore = a.ignore;
                g
            })
            .collect()
    }

    pub fn all_boxes(&self) -> Vec<GtBox> {
        self.images
            .iter()
            .flat_map(|im| self.boxes_for(im.id))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Directory holding the image files referenced by `file` fields.
    pub fn image_path(&self, root: &Path, record: &ImageRecord) -> PathBuf {
        root.join(&record.file)
    }
}

pub fn write_detections<W: Write>(w: &mut W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut *w, d)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// One tile of a larger image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Offset of the patch in the source image.
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Boxes re-offset to patch coordinates and clipped to its bounds.
    pub boxes: Vec<GtBox>,
}

/// Tiles an image into `pw` x `ph` patches with `overlap` pixels shared
/// between neighbours, clipping boxes into each patch. Boxes losing more
/// than half their area at a cut are dropped from that patch.
pub fn crop_patches(
    width: usize,
    height: usize,
    boxes: &[GtBox],
    pw: usize,
    ph: usize,
    overlap: usize,
) -> Result<Vec<Patch>> {
    if pw == 0 || ph == 0 || overlap >= pw || overlap >= ph {
        return Err(Error::arg(format!(
            "bad patch geometry {pw}x{ph} overlap {overlap}"
        )));
    }
    let starts = |extent: usize, patch: usize| -> Vec<usize> {
        if extent <= patch {
            return vec![0];
        }
        let step = patch - overlap;
        let mut v: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < extent).collect();
        v.push(extent - patch);
        v
    };
    let mut patches = Vec::new();
    for &y0 in &starts(height, ph) {
        for &x0 in &starts(width, pw) {
            let w = pw.min(width);
            let h = ph.min(height);
            let mut kept = Vec::new();
            for b in boxes {
                let cx0 = b.x.max(x0 as f64);
                let cy0 = b.y.max(y0 as f64);
                let cx1 = (b.x + b.w).min((x0 + w) as f64);
                let cy1 = (b.y + b.h).min((y0 + h) as f64);
                if cx1 <= cx0 || cy1 <= cy0 {
                    continue;
                }
                let clipped = GtBox {
                    x: cx0 - x0 as f64,
                    y: cy0 - y0 as f64,
                    w: cx1 - cx0,
                    h: cy1 - cy0,
                    ignore: b.ignore,
                };
                if clipped.area() >= 0.5 * b.area() {
                    kept.push(clipped);
                }
            }
            patches.push(Patch {
                x0,
                y0,
                width: w,
                height: h,
                boxes: kept,
            });
        }
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_json_roundtrip() {
        let ds = Dataset {
            images: vec![ImageRecord {
                id: 3,
                file: "img3.pgm".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![Annotation {
                image_id: 3,
                bbox: [1.0, 2.0, 5.0, 6.0],
                ignore: false,
            }],
        };
        let text = serde_json::to_string(&ds).unwrap();
        let back: Dataset = serde_json::from_str(&text).unwrap();
        assert_eq!(back.images[0].file, "img3.pgm");
        assert_eq!(back.boxes_for(3).len(), 1);
        assert_eq!(back.boxes_for(4).len(), 0);
    }

    #[test]
    fn detections_jsonl_roundtrip() {
        let dets = vec![
            Detection {
                image_id: 1,
                bbox: [0.0, 1.0, 4.0, 4.0],
                score: 0.75,
            },
            Detection {
                image_id: 2,
                bbox: [3.0, 3.0, 6.0, 2.0],
                score: 0.25,
            },
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = read_detections(buf.as_slice()).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn patch_tiling_covers_and_overlaps() {
        let patches = crop_patches(1600, 1024, &[], 640, 512, 30).unwrap();
        // horizontal starts: 0, 610, 960; vertical: 0, 482, 512
        let xs: Vec<usize> = patches.iter().map(|p| p.x0).collect();
        assert!(xs.contains(&0) && xs.contains(&960));
        for p in &patches {
            assert!(p.x0 + p.width <= 1600);
            assert!(p.y0 + p.height <= 1024);
            assert_eq!((p.width, p.height), (640, 512));
        }
        // every pixel covered
        let covered = |x: usize, y: usize| {
            patches
                .iter()
                .any(|p| x >= p.x0 && x < p.x0 + p.width && y >= p.y0 && y < p.y0 + p.height)
        };
        assert!(covered(1599, 1023) && covered(0, 0) && covered(800, 500));
    }

    #[test]
    fn small_image_is_single_patch() {
        let patches = crop_patches(100, 80, &[], 640, 512, 30).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].width, 100);
        assert_eq!(patches[0].height, 80);
    }

    #[test]
    fn boxes_are_reoffset_and_halved_boxes_dropped() {
        let boxes = vec![
            GtBox::new(650.0, 10.0, 8.0, 8.0),   // inside second column
            GtBox::new(636.0, 10.0, 8.0, 8.0),   // straddles the cut at 640
        ];
        let patches = crop_patches(1250, 512, &boxes, 640, 512, 30).unwrap();
        let first = patches.iter().find(|p| p.x0 == 0).unwrap();
        // straddler keeps 4/8 of its width in patch 0: exactly half, kept
        assert_eq!(first.boxes.len(), 1);
        assert!((first.boxes[0].x - 636.0).abs() < 1e-12);
        let second = patches.iter().find(|p| p.x0 == 610).unwrap();
        // both land fully inside the second patch
        assert_eq!(second.boxes.len(), 2);
        assert!((second.boxes[0].x - 40.0).abs() < 1e-12);
    }

    #[test]
    fn bad_patch_geometry_rejected() {
        assert!(crop_patches(100, 100, &[], 0, 10, 0).is_err());
        assert!(crop_patches(100, 100, &[], 10, 10, 10).is_err());
    }
}
