//! File artifacts: lexicon grids, composition matrices, topographic maps and
//! embedding tables.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{Barycenters, Tag, TopographicPoint};
use crate::referents::Referent;
use crate::sensorimotor::{Utterance, CANVAS};

const GAP: u32 = 2;
const FRAME: u32 = 2;

fn ink(p: f64) -> u8 {
    (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8
}

/// One utterance per (agent, referent), laid out with agents as rows.
pub struct LexiconEntry {
    pub agent: usize,
    pub referent: Referent,
    pub utterance: Utterance,
}

pub fn write_lexicon(png: &Path, csv: &Path, entries: &[LexiconEntry]) -> Result<()> {
    let mut agents: Vec<usize> = entries.iter().map(|e| e.agent).collect();
    agents.sort();
    agents.dedup();
    let mut referents: Vec<Referent> = entries.iter().map(|e| e.referent).collect();
    referents.sort();
    referents.dedup();
    if entries.is_empty() {
        return Err(Error::InvalidInput("empty lexicon".into()));
    }
    let tile = CANVAS as u32 + GAP;
    let mut img = GrayImage::from_pixel(tile * referents.len() as u32 + GAP, tile * agents.len() as u32 + GAP, Luma([255]));
    let mut manifest = String::from("agent,referent,row,col\n");
    for e in entries {
        let row = agents.binary_search(&e.agent).unwrap();
        let col = referents.binary_search(&e.referent).unwrap();
        let (x0, y0) = (GAP + col as u32 * tile, GAP + row as u32 * tile);
        for r in 0..CANVAS {
            for c in 0..CANVAS {
                img.put_pixel(x0 + c as u32, y0 + r as u32, Luma([ink(e.utterance.pixel(r, c))]));
            }
        }
        writeln!(manifest, "{},{},{row},{col}", e.agent, e.referent.label()).unwrap();
    }
    img.save(png)?;
    std::fs::write(csv, manifest)?;
    Ok(())
}

/// Upper-triangular `m×m` matrix of one agent's utterances: cell (i,i) holds
/// feature `i` (blue frame), cell (i,j) the pair {i,j} (grey frame).
pub fn write_composition_matrix(png: &Path, csv: &Path, m: usize, utterances: &[(Referent, Utterance)]) -> Result<usize> {
    let cell = CANVAS as u32 + 2 * FRAME + GAP;
    let side = cell * m as u32 + GAP;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let mut manifest = String::from("row,col,referent,frame\n");
    let mut cells = 0;
    for (r, u) in utterances {
        let f = r.features();
        let (i, j) = match f.as_slice() {
            [i] => (*i, *i),
            [i, j] => (*i, *j),
            _ => continue,
        };
        if j >= m {
            return Err(Error::InvalidInput(format!("feature {j} outside a {m}x{m} matrix")));
        }
        let frame = if i == j { Rgb([0, 0, 255]) } else { Rgb([160, 160, 160]) };
        let (x0, y0) = (GAP + j as u32 * cell, GAP + i as u32 * cell);
        let outer = CANVAS as u32 + 2 * FRAME;
        for dy in 0..outer {
            for dx in 0..outer {
                img.put_pixel(x0 + dx, y0 + dy, frame);
            }
        }
        for rr in 0..CANVAS {
            for cc in 0..CANVAS {
                let v = ink(u.pixel(rr, cc));
                img.put_pixel(x0 + FRAME + cc as u32, y0 + FRAME + rr as u32, Rgb([v, v, v]));
            }
        }
        writeln!(manifest, "{i},{j},{},{}", r.label(), if i == j { "blue" } else { "grey" }).unwrap();
        cells += 1;
    }
    img.save(png)?;
    std::fs::write(csv, manifest)?;
    Ok(cells)
}

pub fn topographic_csv(points: &[TopographicPoint]) -> String {
    let mut out = String::from("agent,referent,tag,x,y\n");
    for p in points {
        writeln!(out, "{},{},{},{:?},{:?}", p.agent, p.referent.label(), p.tag.label(), p.x, p.y).unwrap();
    }
    out
}

/// Scatter plot in the plane of distances to the two single-feature utterances.
pub fn topographic_svg(i: usize, j: usize, points: &[TopographicPoint], bary: &Barycenters, rho: f64) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 40.0;
    let extent = points
        .iter()
        .flat_map(|p| [p.x, p.y])
        .fold(1e-9f64, f64::max)
        * 1.05;
    let sx = |v: f64| MARGIN + v / extent * (SIZE - 2.0 * MARGIN);
    let sy = |v: f64| SIZE - MARGIN - v / extent * (SIZE - 2.0 * MARGIN);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (o, far) = (sx(0.0), sx(extent));
    writeln!(s, r#"<line x1="{o}" y1="{}" x2="{far}" y2="{}" stroke="grey"/>"#, sy(0.0), sy(0.0)).unwrap();
    writeln!(s, r#"<line x1="{o}" y1="{}" x2="{o}" y2="{}" stroke="grey"/>"#, sy(0.0), sy(extent)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="12">d(u(r{i}), .)</text>"#, SIZE / 2.0 - 30.0, SIZE - 10.0).unwrap();
    writeln!(s, r#"<text x="4" y="20" font-size="12">d(u(r{j}), .)</text>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" font-size="12">rho = {rho:.4}</text>"#, SIZE - 110.0).unwrap();
    for p in points {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, sx(p.x), sy(p.y), p.tag.color()).unwrap();
    }
    for (tag, c) in [
        (Tag::Both, bary.both),
        (Tag::First, bary.first),
        (Tag::Second, bary.second),
        (Tag::Neither, bary.neither),
    ] {
        writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="9" height="9" fill="none" stroke="{}" stroke-width="2"/>"#,
            sx(c[0]) - 4.5,
            sy(c[1]) - 4.5,
            tag.color()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Referent,
    Utterance,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Referent => "referent",
            Modality::Utterance => "utterance",
        }
    }
}

/// An embedding before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub agent: usize,
    pub referent: String,
    pub perspective: usize,
    pub modality: Modality,
    pub values: Vec<f64>,
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("agent,referent,perspective,modality,norm");
    for k in 0..d {
        write!(out, ",e{k}").unwrap();
    }
    out.push('\n');
    for r in rows {
        let norm = r.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        write!(out, "{},{},{},{},{norm:?}", r.agent, r.referent, r.perspective, r.modality.name()).unwrap();
        for v in &r.values {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let bad = |line: usize| Error::InvalidInput(format!("malformed embedding row {line}"));
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                return Err(bad(n));
            }
            let modality = match f[3] {
                "referent" => Modality::Referent,
                "utterance" => Modality::Utterance,
                _ => return Err(bad(n)),
            };
            let values = f[5..].iter().map(|v| v.parse::<f64>().map_err(|_| bad(n))).collect::<Result<Vec<_>>>()?;
            Ok(EmbeddingRow {
                agent: f[0].parse().map_err(|_| bad(n))?,
                referent: f[1].to_string(),
                perspective: f[2].parse().map_err(|_| bad(n))?,
                modality,
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::referents::enumerate_referents;

    fn blank() -> Utterance {
        Utterance {
            pixels: vec![0.0; CANVAS * CANVAS],
        }
    }

    #[test]
    fn lexicon_grid_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let refs = enumerate_referents(5, 1).unwrap();
        let entries: Vec<LexiconEntry> = (0..2)
            .flat_map(|a| refs.iter().map(move |r| (a, *r)))
            .map(|(agent, referent)| LexiconEntry {
                agent,
                referent,
                utterance: blank(),
            })
            .collect();
        let (png, csv) = (dir.path().join("l.png"), dir.path().join("l.csv"));
        write_lexicon(&png, &csv, &entries).unwrap();
        let img = image::open(&png).unwrap();
        assert_eq!((img.width(), img.height()), (5 * 54 + 2, 2 * 54 + 2));
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 11);
        let first = std::fs::read(&png).unwrap();
        write_lexicon(&png, &csv, &entries).unwrap();
        assert_eq!(first, std::fs::read(&png).unwrap());
    }

    #[test]
    fn composition_matrix_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut items: Vec<(Referent, Utterance)> = enumerate_referents(5, 1).unwrap().into_iter().map(|r| (r, blank())).collect();
        items.extend(enumerate_referents(5, 2).unwrap().into_iter().map(|r| (r, blank())));
        let (png, csv) = (dir.path().join("c.png"), dir.path().join("c.csv"));
        assert_eq!(write_composition_matrix(&png, &csv, 5, &items).unwrap(), 15);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.matches("blue").count(), 5);
        assert_eq!(text.matches("grey").count(), 10);
        let img = image::open(&png).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(2, 2), &Rgb([0, 0, 255]));
    }

    #[test]
    fn embeddings_round_trip_exactly() {
        let rows: Vec<EmbeddingRow> = (0..4)
            .map(|k| EmbeddingRow {
                agent: k % 2,
                referent: "0+3".into(),
                perspective: k,
                modality: if k < 2 { Modality::Referent } else { Modality::Utterance },
                values: (0..32).map(|i| ((i * 7 + k) as f64).sin() / 3.0).collect(),
            })
            .collect();
        let text = embeddings_csv(&rows);
        assert_eq!(parse_embeddings_csv(&text).unwrap(), rows);
        let norm: f64 = text.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert!(norm > 0.0);
    }
}
