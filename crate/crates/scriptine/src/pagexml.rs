//! PAGE XML ground-truth handling.
//!
//! Reads and writes the subset of PAGE needed by the pipeline: `Page`,
//! `TextRegion`, `TextLine`, `Coords`, `TextEquiv`/`Unicode`, and reading
//! order (region-level `ReadingOrder` groups and per-line
//! `custom="readingOrder {index:N;}"` annotations). Everything else is
//! ignored on read and never written.

use ndarray::Array2;
use quick_xml::events::{BytesDecl, BytesText, Event};
use quick_xml::{Reader, Writer};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::lineproc::{LineImage, SourceId};

/// A transcribed text line with its polygon outline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLine {
    pub id: String,
    /// Pixel coordinates, at least 3 points, within the page bounds.
    pub polygon: Vec<(u32, u32)>,
    /// Diplomatic ground truth; empty means untranscribed.
    pub transcription: String,
    /// Position within the page, unique per page.
    pub reading_order: usize,
}

/// One page image with its text lines in reading order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub lines: Vec<TextLine>,
}

/// Handwriting style of a manuscript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Gothic,
    Bastarda,
    Mixed,
}

impl Style {
    pub fn name(self) -> &'static str {
        match self {
            Style::Gothic => "gothic",
            Style::Bastarda => "bastarda",
            Style::Mixed => "mixed",
        }
    }

    pub fn parse(text: &str) -> Option<Style> {
        match text.to_ascii_lowercase().as_str() {
            "gothic" => Some(Style::Gothic),
            "bastarda" => Some(Style::Bastarda),
            "mixed" => Some(Style::Mixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manuscript {
    pub id: String,
    pub style: Style,
    pub pages: Vec<Page>,
}

/// All manuscripts of a project; ids are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub manuscripts: Vec<Manuscript>,
}

impl Corpus {
    pub fn push(&mut self, manuscript: Manuscript) -> Result<(), PageXmlError> {
        if self.manuscripts.iter().any(|m| m.id == manuscript.id) {
            return Err(PageXmlError::Validation(format!(
                "duplicate manuscript id {:?}",
                manuscript.id
            )));
        }
        self.manuscripts.push(manuscript);
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PageXmlError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("not a PAGE document: {0}")]
    NotPage(String),
    #[error("line {line_id:?}: polygon has {points} points, need at least 3")]
    BadPolygon { line_id: String, points: usize },
    #[error("line {line_id:?}: point ({x},{y}) outside page bounds {w}x{h}")]
    OutOfBounds { line_id: String, x: u32, y: u32, w: u32, h: u32 },
    #[error("polygon of line {line_id:?} exceeds raster {w}x{h}")]
    RasterBounds { line_id: String, w: usize, h: usize },
    #[error("{0}")]
    Validation(String),
}

fn xml_err(reader: &Reader<&[u8]>, err: impl std::fmt::Display) -> PageXmlError {
    PageXmlError::Xml { offset: reader.buffer_position(), message: err.to_string() }
}

/// Pull `index:N` out of a `custom="readingOrder {index:3;}"` attribute.
fn custom_reading_order(custom: &str) -> Option<usize> {
    let after = custom.split("readingOrder").nth(1)?;
    let after = after.split("index:").nth(1)?;
    let digits: String = after.trim_start().chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn parse_points(text: &str) -> Option<Vec<(u32, u32)>> {
    let mut points = Vec::new();
    for pair in text.split_whitespace() {
        let (x, y) = pair.split_once(',')?;
        points.push((x.trim().parse().ok()?, y.trim().parse().ok()?));
    }
    Some(points)
}

#[derive(Default)]
struct RawLine {
    id: String,
    polygon: Vec<(u32, u32)>,
    transcription: Option<String>,
    custom_order: Option<usize>,
    region_id: Option<String>,
    region_doc_index: usize,
}

/// Parse one PAGE XML document.
///
/// Lines are returned in reading order: regions follow the `ReadingOrder`
/// group when present (document order otherwise), and lines with explicit
/// `custom` reading-order indices are sorted by them. `reading_order` is
/// renumbered 0..n after sorting.
pub fn parse_page(xml: &[u8]) -> Result<Page, PageXmlError> {
    let mut reader = Reader::from_reader(xml);
    reader.config_mut().trim_text(true);

    let mut saw_pcgts = false;
    let mut page: Option<(String, u32, u32)> = None;
    let mut lines: Vec<RawLine> = Vec::new();
    let mut region_order: BTreeMap<String, usize> = BTreeMap::new();
    let mut region_doc_index = 0usize;
    let mut current_region_id: Option<String> = None;
    let mut current_line: Option<RawLine> = None;
    let mut in_unicode = false;

    loop {
        let event = reader.read_event().map_err(|e| xml_err(&reader, e))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let empty = matches!(event, Event::Empty(_));
                let local = e.local_name();
                let name = std::str::from_utf8(local.as_ref()).unwrap_or("");
                let attr = |key: &str| -> Result<Option<String>, PageXmlError> {
                    for a in e.attributes() {
                        let a = a.map_err(|err| xml_err(&reader, err))?;
                        if a.key.local_name().as_ref() == key.as_bytes() {
                            let v =
                                a.unescape_value().map_err(|err| xml_err(&reader, err))?;
                            return Ok(Some(v.into_owned()));
                        }
                    }
                    Ok(None)
                };
                match name {
                    "PcGts" => {
                        let ns = attr("xmlns")?.unwrap_or_default();
                        if !ns.contains("pagecontent") {
                            return Err(PageXmlError::NotPage(format!(
                                "root PcGts namespace {ns:?}"
                            )));
                        }
                        saw_pcgts = true;
                    }
                    "Page" => {
                        let image = attr("imageFilename")?.unwrap_or_default();
                        let w: u32 = attr("imageWidth")?
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| {
                                PageXmlError::Validation("missing/bad imageWidth".into())
                            })?;
                        let h: u32 = attr("imageHeight")?
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| {
                                PageXmlError::Validation("missing/bad imageHeight".into())
                            })?;
                        page = Some((image, w, h));
                    }
                    "RegionRefIndexed" => {
                        if let (Some(region), Some(index)) = (attr("regionRef")?, attr("index")?)
                        {
                            if let Ok(index) = index.parse::<usize>() {
                                region_order.insert(region, index);
                            }
                        }
                    }
                    "TextRegion" => {
                        current_region_id = attr("id")?;
                        region_doc_index += 1;
                    }
                    "TextLine" => {
                        let mut line = RawLine {
                            id: attr("id")?.unwrap_or_else(|| format!("line_{}", lines.len())),
                            region_id: current_region_id.clone(),
                            region_doc_index,
                            ..RawLine::default()
                        };
                        if let Some(custom) = attr("custom")? {
                            line.custom_order = custom_reading_order(&custom);
                        }
                        if empty {
                            lines.push(line);
                        } else {
                            current_line = Some(line);
                        }
                    }
                    "Coords" => {
                        if let Some(line) = current_line.as_mut() {
                            if let Some(points) = attr("points")? {
                                line.polygon = parse_points(&points).ok_or_else(|| {
                                    PageXmlError::Validation(format!(
                                        "line {:?}: bad points attribute",
                                        line.id
                                    ))
                                })?;
                            }
                        }
                    }
                    "Unicode" => {
                        if let Some(line) = current_line.as_mut() {
                            in_unicode = !empty;
                            line.transcription.get_or_insert_with(String::new);
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                if in_unicode {
                    if let Some(line) = current_line.as_mut() {
                        let text = t.unescape().map_err(|e| xml_err(&reader, e))?;
                        line.transcription
                            .get_or_insert_with(String::new)
                            .push_str(&text);
                    }
                }
            }
            Event::End(ref e) => {
                match std::str::from_utf8(e.local_name().as_ref()).unwrap_or("") {
                    "TextLine" => {
                        if let Some(line) = current_line.take() {
                            lines.push(line);
                        }
                    }
                    "TextRegion" => current_region_id = None,
                    "Unicode" => in_unicode = false,
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }

    if !saw_pcgts {
        return Err(PageXmlError::NotPage("no PcGts root element".into()));
    }
    let (image_ref, width, height) =
        page.ok_or_else(|| PageXmlError::Validation("no Page element".into()))?;
    if width == 0 || height == 0 {
        return Err(PageXmlError::Validation("page dimensions must be positive".into()));
    }

    // Explicit per-line indices win when every line carries one; otherwise
    // regions follow the ReadingOrder group (unlisted regions trail in
    // document order) and lines follow document order within their region.
    let all_explicit = !lines.is_empty() && lines.iter().all(|l| l.custom_order.is_some());
    let mut order: Vec<usize> = (0..lines.len()).collect();
    if all_explicit {
        let mut seen = BTreeSet::new();
        for line in &lines {
            if !seen.insert(line.custom_order.unwrap()) {
                return Err(PageXmlError::Validation(format!(
                    "duplicate reading order index {} on line {:?}",
                    line.custom_order.unwrap(),
                    line.id
                )));
            }
        }
        order.sort_by_key(|&i| lines[i].custom_order.unwrap());
    } else {
        let region_rank = |line: &RawLine| match line
            .region_id
            .as_ref()
            .and_then(|id| region_order.get(id))
        {
            Some(&rank) => (0usize, rank),
            None => (1, line.region_doc_index),
        };
        order.sort_by_key(|&i| (region_rank(&lines[i]), i));
    }

    let mut out = Vec::with_capacity(lines.len());
    for (position, &i) in order.iter().enumerate() {
        let raw = &lines[i];
        if raw.polygon.len() < 3 {
            return Err(PageXmlError::BadPolygon {
                line_id: raw.id.clone(),
                points: raw.polygon.len(),
            });
        }
        for &(x, y) in &raw.polygon {
            if x > width || y > height {
                return Err(PageXmlError::OutOfBounds {
                    line_id: raw.id.clone(),
                    x,
                    y,
                    w: width,
                    h: height,
                });
            }
        }
        out.push(TextLine {
            id: raw.id.clone(),
            polygon: raw.polygon.clone(),
            transcription: raw.transcription.clone().unwrap_or_default(),
            reading_order: position,
        });
    }

    let mut ids = BTreeSet::new();
    for line in &out {
        if !ids.insert(line.id.clone()) {
            return Err(PageXmlError::Validation(format!("duplicate line id {:?}", line.id)));
        }
    }

    Ok(Page { image_ref, width, height, lines: out })
}

fn validate_page(page: &Page) -> Result<(), PageXmlError> {
    if page.width == 0 || page.height == 0 {
        return Err(PageXmlError::Validation("page dimensions must be positive".into()));
    }
    let mut orders = BTreeSet::new();
    for line in &page.lines {
        if line.polygon.len() < 3 {
            return Err(PageXmlError::BadPolygon {
                line_id: line.id.clone(),
                points: line.polygon.len(),
            });
        }
        for &(x, y) in &line.polygon {
            if x > page.width || y > page.height {
                return Err(PageXmlError::OutOfBounds {
                    line_id: line.id.clone(),
                    x,
                    y,
                    w: page.width,
                    h: page.height,
                });
            }
        }
        if !orders.insert(line.reading_order) {
            return Err(PageXmlError::Validation(format!(
                "duplicate reading order {} on line {:?}",
                line.reading_order, line.id
            )));
        }
    }
    Ok(())
}

/// Serialize a page to PAGE XML (UTF-8). `parse_page(write_page(p))`
/// reproduces `p` on all modeled fields.
pub fn write_page(page: &Page) -> Result<Vec<u8>, PageXmlError> {
    validate_page(page)?;
    let mut writer = Writer::new_with_indent(Vec::new(), b' ', 2);
    let ws = |e: quick_xml::Error| PageXmlError::Validation(format!("write failed: {e}"));
    writer
        .write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)))
        .map_err(ws)?;

    writer
        .create_element("PcGts")
        .with_attribute((
            "xmlns",
            "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15",
        ))
        .write_inner_content::<_, quick_xml::Error>(|pcgts| {
            pcgts
                .create_element("Page")
                .with_attribute(("imageFilename", page.image_ref.as_str()))
                .with_attribute(("imageWidth", page.width.to_string().as_str()))
                .with_attribute(("imageHeight", page.height.to_string().as_str()))
                .write_inner_content::<_, quick_xml::Error>(|pg| {
                    let region_points =
                        format!("0,0 {},0 {},{} 0,{}", page.width, page.width, page.height, page.height);
                    pg.create_element("TextRegion")
                        .with_attribute(("id", "r0"))
                        .write_inner_content::<_, quick_xml::Error>(|region| {
                            region
                                .create_element("Coords")
                                .with_attribute(("points", region_points.as_str()))
                                .write_empty()?;
                            let mut ordered: Vec<&TextLine> = page.lines.iter().collect();
                            ordered.sort_by_key(|l| l.reading_order);
                            for line in ordered {
                                let custom =
                                    format!("readingOrder {{index:{};}}", line.reading_order);
                                let points = line
                                    .polygon
                                    .iter()
                                    .map(|&(x, y)| format!("{x},{y}"))
                                    .collect::<Vec<_>>()
                                    .join(" ");
                                let el = region
                                    .create_element("TextLine")
                                    .with_attribute(("id", line.id.as_str()))
                                    .with_attribute(("custom", custom.as_str()));
                                let transcription = line.transcription.clone();
                                el.write_inner_content::<_, quick_xml::Error>(|tl| {
                                    tl.create_element("Coords")
                                        .with_attribute(("points", points.as_str()))
                                        .write_empty()?;
                                    if !transcription.is_empty() {
                                        tl.create_element("TextEquiv")
                                            .write_inner_content::<_, quick_xml::Error>(
                                                |te| {
                                                    te.create_element("Unicode")
                                                        .write_text_content(BytesText::new(
                                                            &transcription,
                                                        ))?;
                                                    Ok(())
                                                },
                                            )?;
                                    }
                                    Ok(())
                                })?;
                            }
                            Ok(())
                        })?;
                    Ok(())
                })?;
            Ok(())
        })
        .map_err(ws)?;

    Ok(writer.into_inner())
}

/// Even-odd point-in-polygon test for a pixel center.
fn center_in_polygon(px: f64, py: f64, polygon: &[(u32, u32)]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (polygon[i].0 as f64, polygon[i].1 as f64);
        let (xj, yj) = (polygon[j].0 as f64, polygon[j].1 as f64);
        if (yi > py) != (yj > py) {
            let x_cross = xj + (py - yj) * (xi - xj) / (yi - yj);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Crop the polygon's bounding box from a grayscale page raster, masking
/// pixels outside the polygon to background white.
pub fn extract_line_image(
    raster: &Array2<f32>,
    line: &TextLine,
    manuscript: &str,
    page: &str,
) -> Result<LineImage, PageXmlError> {
    if line.polygon.len() < 3 {
        return Err(PageXmlError::BadPolygon {
            line_id: line.id.clone(),
            points: line.polygon.len(),
        });
    }
    let (rh, rw) = raster.dim();
    let min_x = line.polygon.iter().map(|p| p.0).min().unwrap() as usize;
    let max_x = line.polygon.iter().map(|p| p.0).max().unwrap() as usize;
    let min_y = line.polygon.iter().map(|p| p.1).min().unwrap() as usize;
    let max_y = line.polygon.iter().map(|p| p.1).max().unwrap() as usize;
    if max_x > rw || max_y > rh {
        return Err(PageXmlError::RasterBounds { line_id: line.id.clone(), w: rw, h: rh });
    }
    let w = (max_x - min_x).max(1);
    let h = (max_y - min_y).max(1);
    let mut pixels = Array2::<f32>::from_elem((h, w), 1.0);
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (min_y + y, min_x + x);
            if ry >= rh || rx >= rw {
                continue;
            }
            let cx = rx as f64 + 0.5;
            let cy = ry as f64 + 0.5;
            if center_in_polygon(cx, cy, &line.polygon) {
                pixels[(y, x)] = raster[(ry, rx)];
            }
        }
    }
    Ok(LineImage::new(pixels, SourceId::new(manuscript, page, line.id.clone())))
}

/// Per-manuscript page and line counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsRow {
    pub manuscript: String,
    pub pages: usize,
    pub lines_all: usize,
    pub lines_transcribed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusStats {
    pub rows: Vec<StatsRow>,
    pub total_pages: usize,
    pub total_lines: usize,
    pub total_transcribed: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for manuscript in &corpus.manuscripts {
        let pages = manuscript.pages.len();
        let lines_all: usize = manuscript.pages.iter().map(|p| p.lines.len()).sum();
        let lines_transcribed: usize = manuscript
            .pages
            .iter()
            .map(|p| p.lines.iter().filter(|l| !l.transcription.is_empty()).count())
            .sum();
        stats.total_pages += pages;
        stats.total_lines += lines_all;
        stats.total_transcribed += lines_transcribed;
        stats.rows.push(StatsRow {
            manuscript: manuscript.id.clone(),
            pages,
            lines_all,
            lines_transcribed,
        });
    }
    stats
}
