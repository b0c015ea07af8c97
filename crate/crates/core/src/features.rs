//! Per-window music features reduced to 2-D trajectories over time, with
//! CSV/SVG export and DTW-based corpus comparison.
//!
//! Each window is `T` consecutive onset events (the same windows used for
//! segmentation). Features 0..15 describe note intensity and frequency,
//! features 15..30 describe pitch motion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::NoteEvent;
use crate::score::{onset_events, Grouping, OnsetEvent};

pub const NUM_FEATURES: usize = 30;
pub const NUM_X: usize = 15;
pub const DEFAULT_MAX_ROWS: usize = 120;
pub const CSV_HEADER: &str = "song_id,origin,t,x,y";

/// Indices (0-based) of the pitch-motion features that depend only on
/// intervals and so are unchanged by transposition.
pub const INTERVAL_FEATURES: [usize; 10] = [15, 16, 17, 21, 22, 23, 24, 27, 28, 29];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no feature rows to reduce")]
    EmptyRows,
    #[error("trajectory has no points")]
    EmptyTrajectory,
    #[error("no generated trajectories")]
    NoGenerated,
    #[error("malformed trajectory CSV: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow(pub [f64; NUM_FEATURES]);

impl FeatureRow {
    pub fn x(&self) -> &[f64] {
        &self.0[..NUM_X]
    }

    pub fn y(&self) -> &[f64] {
        &self.0[NUM_X..]
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn intervals(voice: &[i32]) -> Vec<i32> {
    voice.windows(2).map(|w| w[1] - w[0]).collect()
}

fn direction_change_rate(deltas: &[i32]) -> f64 {
    let signs: Vec<i32> = deltas.iter().filter(|&&d| d != 0).map(|d| d.signum()).collect();
    if signs.len() < 2 {
        return 0.0;
    }
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    changes as f64 / (signs.len() - 1) as f64
}

/// Pitch-class entropy in nats; probabilities are summed in sorted order so
/// the value does not depend on which pitch classes are occupied.
fn pitch_class_entropy(pitches: &[u8]) -> f64 {
    if pitches.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 12];
    for &p in pitches {
        counts[usize::from(p % 12)] += 1;
    }
    let mut counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let n = pitches.len() as f64;
    let h = counts.iter().fold(0.0, |acc, &c| {
        let p = c as f64 / n;
        acc - p * p.ln()
    });
    h.max(0.0)
}

/// Features of one window of onset events.
pub fn window_features(events: &[OnsetEvent], ticks_per_quarter: u16) -> FeatureRow {
    let tpq = u64::from(ticks_per_quarter);
    let groups: Vec<&[NoteEvent]> = events
        .iter()
        .filter_map(|e| match e {
            OnsetEvent::Group { notes, .. } => Some(notes.as_slice()),
            OnsetEvent::Rest => None,
        })
        .collect();
    let onsets: Vec<u64> = events
        .iter()
        .filter_map(|e| match e {
            OnsetEvent::Group { onset, .. } => Some(*onset),
            OnsetEvent::Rest => None,
        })
        .collect();
    let notes: Vec<NoteEvent> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n_events = events.len();
    let rests = n_events - groups.len();

    let chord_sizes: Vec<f64> = groups
        .iter()
        .map(|g| {
            let mut p: Vec<u8> = g.iter().map(|n| n.pitch).collect();
            p.sort_unstable();
            p.dedup();
            p.len() as f64
        })
        .collect();
    let sounding: Vec<f64> = onsets
        .iter()
        .map(|&t| notes.iter().filter(|n| n.onset_ticks <= t && t < n.end_ticks()).count() as f64)
        .collect();
    let durations: Vec<f64> = notes.iter().map(|n| n.duration_ticks as f64).collect();
    let velocities: Vec<f64> = notes.iter().map(|n| f64::from(n.velocity)).collect();
    let pitches: Vec<u8> = notes.iter().map(|n| n.pitch).collect();
    let pitch_f: Vec<f64> = pitches.iter().map(|&p| f64::from(p)).collect();
    let mut distinct = pitches.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let span = match (notes.iter().map(|n| n.onset_ticks).min(), notes.iter().map(NoteEvent::end_ticks).max()) {
        (Some(a), Some(b)) if b > a => (b - a) as f64,
        _ => 0.0,
    };
    let max_of = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_of = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let range = |v: &[f64]| if v.is_empty() { 0.0 } else { max_of(v) - min_of(v) };

    let top: Vec<i32> = groups.iter().map(|g| g.iter().map(|n| i32::from(n.pitch)).max().unwrap_or(0)).collect();
    let bottom: Vec<i32> = groups.iter().map(|g| g.iter().map(|n| i32::from(n.pitch)).min().unwrap_or(0)).collect();
    let top_d = intervals(&top);
    let abs_top: Vec<f64> = top_d.iter().map(|d| f64::from(d.abs())).collect();
    let signed_top: Vec<f64> = top_d.iter().map(|&d| f64::from(d)).collect();
    let abs_bottom: Vec<f64> = intervals(&bottom).iter().map(|d| f64::from(d.abs())).collect();
    let count_top = |pred: &dyn Fn(i32) -> bool| fraction(top_d.iter().filter(|&&d| pred(d)).count(), top_d.len());

    let x = [
        groups.len() as f64,
        mean(&sounding),
        chord_sizes.iter().copied().fold(0.0, f64::max),
        mean(&chord_sizes),
        fraction(rests, n_events),
        mean(&durations),
        median(&durations),
        variance(&durations),
        distinct.len() as f64,
        mean(&velocities),
        range(&velocities),
        fraction(notes.iter().filter(|n| n.duration_ticks <= tpq / 4).count(), notes.len()),
        fraction(notes.iter().filter(|n| n.duration_ticks >= 2 * tpq).count(), notes.len()),
        if span > 0.0 { notes.len() as f64 / span } else { 0.0 },
        fraction(chord_sizes.iter().filter(|&&s| s >= 2.0).count(), n_events),
    ];
    let y = [
        mean(&abs_top),
        median(&abs_top),
        variance(&signed_top).sqrt(),
        range(&pitch_f),
        mean(&pitch_f),
        variance(&pitch_f).sqrt(),
        direction_change_rate(&top_d),
        count_top(&|d| d.abs() <= 2),
        count_top(&|d| d.abs() >= 7),
        pitch_class_entropy(&pitches),
        if pitch_f.is_empty() { 0.0 } else { max_of(&pitch_f) },
        if pitch_f.is_empty() { 0.0 } else { min_of(&pitch_f) },
        mean(&abs_bottom),
        count_top(&|d| d.abs() == 1),
        count_top(&|d| d == 0),
    ];
    let mut row = [0.0; NUM_FEATURES];
    row[..NUM_X].copy_from_slice(&x);
    row[NUM_X..].copy_from_slice(&y);
    FeatureRow(row)
}

/// One row per full window of `window_len` onset events; the remainder is dropped.
pub fn feature_rows(notes: &[NoteEvent], grouping: Grouping, ticks_per_quarter: u16, window_len: usize) -> Vec<FeatureRow> {
    let events = onset_events(notes, grouping);
    events.chunks_exact(window_len).map(|w| window_features(w, ticks_per_quarter)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Per-feature min-max over the song's rows; constant features map to 0.5.
    #[default]
    MinMax,
    /// Per-feature standard score; constant features map to 0.
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub song_id: String,
    pub origin: String,
    pub points: Vec<Point>,
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; v.len()]
    }
}

fn z_score(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    let s = variance(v).sqrt();
    if s > 0.0 {
        v.iter().map(|x| (x - m) / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Scales every feature across the song, averages each row's x and y
/// groups, then min-max scales the two resulting series into [0, 1].
pub fn reduce_rows(rows: &[FeatureRow], normalization: Normalization) -> Result<Vec<Point>> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyRows);
    }
    let scaled: Vec<Vec<f64>> = (0..NUM_FEATURES)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r.0[j]).collect();
            match normalization {
                Normalization::MinMax => min_max(&col),
                Normalization::ZScore => z_score(&col),
            }
        })
        .collect();
    let xs: Vec<f64> = (0..rows.len()).map(|t| (0..NUM_X).map(|j| scaled[j][t]).sum::<f64>() / NUM_X as f64).collect();
    let ys: Vec<f64> = (0..rows.len())
        .map(|t| (NUM_X..NUM_FEATURES).map(|j| scaled[j][t]).sum::<f64>() / (NUM_FEATURES - NUM_X) as f64)
        .collect();
    let (xs, ys) = (min_max(&xs), min_max(&ys));
    Ok((0..rows.len()).map(|t| Point { t, x: xs[t], y: ys[t] }).collect())
}

/// Keeps trajectories of at most `max_rows` points.
pub fn filter_by_length(trajectories: Vec<Trajectory>, max_rows: usize) -> Vec<Trajectory> {
    trajectories.into_iter().filter(|t| t.points.len() <= max_rows).collect()
}

pub fn export_csv(trajectories: &[Trajectory]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for tr in trajectories {
        for p in &tr.points {
            w.write_record([
                tr.song_id.as_str(),
                tr.origin.as_str(),
                &p.t.to_string(),
                &format!("{:.6}", p.x),
                &format!("{:.6}", p.y),
            ])
            .expect("in-memory write");
        }
    }
    w.into_inner().expect("in-memory flush")
}

/// Parses [`export_csv`] output; consecutive rows of one song form a trajectory.
pub fn parse_csv(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers().map_err(|e| FeatureError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(FeatureError::Csv(format!("expected header {CSV_HEADER:?}")));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| FeatureError::Csv(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| FeatureError::Csv(format!("row {} is short", line + 2)));
        let bad = |what: &str| FeatureError::Csv(format!("bad {what} on row {}", line + 2));
        let (song, origin) = (field(0)?, field(1)?);
        let t: usize = field(2)?.parse().map_err(|_| bad("t"))?;
        let x: f64 = field(3)?.parse().map_err(|_| bad("x"))?;
        let y: f64 = field(4)?.parse().map_err(|_| bad("y"))?;
        let point = Point { t, x, y };
        match out.last_mut() {
            Some(tr) if tr.song_id == song && tr.origin == origin => {
                if tr.points.last().is_some_and(|p| p.t >= t) {
                    return Err(bad("non-increasing t"));
                }
                tr.points.push(point);
            }
            _ => out.push(Trajectory { song_id: song.to_string(), origin: origin.to_string(), points: vec![point] }),
        }
    }
    Ok(out)
}

/// Stable color for an origin label (FNV-1a hash to hue).
pub fn origin_color(label: &str) -> String {
    let mut hash: u32 = 0x811c_9dc5;
    for b in label.bytes() {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(0x0100_0193);
    }
    let hue = f64::from(hash % 360);
    let (s, l) = (0.65, 0.45);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Plots every trajectory as a polyline in the x–y plane with a legend of origins.
pub fn render_svg(trajectories: &[Trajectory], width: u32, height: u32) -> Vec<u8> {
    let (w, h) = (f64::from(width.max(200)), f64::from(height.max(150)));
    let (margin, legend_w) = (30.0, 140.0);
    let plot_w = w - 2.0 * margin - legend_w;
    let plot_h = h - 2.0 * margin;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888888"/>"##
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">intensity (x)</text>"#, margin + plot_w / 2.0 - 30.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="11" transform="rotate(-90 10 {})">pitch change (y)</text>"#, margin + plot_h / 2.0 + 40.0, margin + plot_h / 2.0);
    for tr in trajectories {
        let pts: Vec<String> = tr
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", margin + p.x * plot_w, margin + (1.0 - p.y) * plot_h))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-song="{}" fill="none" stroke="{}" stroke-width="1" stroke-opacity="0.7" points="{}"/>"#,
            xml_escape(&tr.song_id),
            origin_color(&tr.origin),
            pts.join(" ")
        );
    }
    let origins: std::collections::BTreeSet<&str> = trajectories.iter().map(|t| t.origin.as_str()).collect();
    let lx = w - legend_w - margin / 2.0 + 10.0;
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, o) in origins.iter().enumerate() {
        let y = margin + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{}"/>"#, origin_color(o));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, lx + 14.0, y + 9.0, xml_escape(o));
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s.into_bytes()
}

fn point_distance(a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    (dx * dx + dy * dy).sqrt()
}

/// Classic DTW with Euclidean point cost.
pub fn dtw_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(FeatureError::EmptyTrajectory);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for pa in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = point_distance(pa, &b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub origin: String,
    pub corpus_songs: usize,
    /// Mean over generated songs of their mean DTW to this label's songs.
    pub mean_dtw: f64,
    /// Mean over generated songs of their nearest-song DTW.
    pub mean_min_dtw: f64,
    pub min_dtw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SongDistance {
    pub origin: String,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SongReport {
    pub song_id: String,
    pub origin: String,
    pub distances: Vec<SongDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub generated_songs: usize,
    pub labels: Vec<LabelSummary>,
    pub songs: Vec<SongReport>,
}

/// DTW from every generated trajectory to every corpus trajectory, summarized
/// per corpus origin label (labels in sorted order).
pub fn corpus_report(generated: &[Trajectory], corpus: &[Trajectory]) -> Result<CorpusReport> {
    if generated.is_empty() {
        return Err(FeatureError::NoGenerated);
    }
    let mut by_label: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for tr in corpus {
        by_label.entry(tr.origin.as_str()).or_default().push(tr);
    }
    let mut songs = Vec::with_capacity(generated.len());
    for g in generated {
        let mut distances = Vec::with_capacity(by_label.len());
        for (label, members) in &by_label {
            let ds = members.iter().map(|m| dtw_distance(&g.points, &m.points)).collect::<Result<Vec<f64>>>()?;
            distances.push(SongDistance {
                origin: label.to_string(),
                mean: mean(&ds),
                min: ds.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
        songs.push(SongReport { song_id: g.song_id.clone(), origin: g.origin.clone(), distances });
    }
    let labels = by_label
        .iter()
        .enumerate()
        .map(|(i, (label, members))| {
            let means: Vec<f64> = songs.iter().map(|s| s.distances[i].mean).collect();
            let mins: Vec<f64> = songs.iter().map(|s| s.distances[i].min).collect();
            LabelSummary {
                origin: label.to_string(),
                corpus_songs: members.len(),
                mean_dtw: mean(&means),
                mean_min_dtw: mean(&mins),
                min_dtw: mins.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    Ok(CorpusReport { generated_songs: generated.len(), labels, songs })
}

impl CorpusReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>12} {:>12} {:>12}\n", "origin", "songs", "mean_dtw", "mean_min", "min_dtw");
        for l in &self.labels {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>12.6} {:>12.6} {:>12.6}",
                l.origin, l.corpus_songs, l.mean_dtw, l.mean_min_dtw, l.min_dtw
            );
        }
        s
    }
}
