//! Push records, engagement statistics and the JSONL corpus format.
//!
//! Rates are never stored on disk. Every rate uses exposure (PV) as its
//! denominator and is recomputed from the raw counts when a line is read.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid stats: {0}")]
    InvalidStats(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {push_id}: {message}")]
    Validation { push_id: String, message: String },
    #[error("duplicate push_id {push_id} on line {line}")]
    Duplicate { push_id: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw engagement event counts for one notification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub clicks: u64,
    pub short_views: u64,
    pub long_views: u64,
    pub hates: u64,
}

/// Exposure, event counts and the rates derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngagementStats {
    pub pv: u64,
    pub clicks: u64,
    pub short_views: u64,
    pub long_views: u64,
    pub hates: u64,
    pub ctr: f64,
    pub svr: f64,
    pub lvtr: f64,
    pub htr: f64,
}

impl EngagementStats {
    pub fn counts(&self) -> EventCounts {
        EventCounts {
            clicks: self.clicks,
            short_views: self.short_views,
            long_views: self.long_views,
            hates: self.hates,
        }
    }
}

/// Builds [`EngagementStats`] from raw counts, dividing each by `pv`.
///
/// `pv == 0` is accepted only when every count is zero ("never served").
pub fn derive_rates(counts: EventCounts, pv: u64) -> Result<EngagementStats, CorpusError> {
    let named = [
        ("clicks", counts.clicks),
        ("short_views", counts.short_views),
        ("long_views", counts.long_views),
        ("hates", counts.hates),
    ];
    for (name, n) in named {
        if n > pv {
            return Err(CorpusError::InvalidStats(format!("{name}={n} exceeds pv={pv}")));
        }
    }
    let rate = |n: u64| if pv == 0 { 0.0 } else { n as f64 / pv as f64 };
    Ok(EngagementStats {
        pv,
        clicks: counts.clicks,
        short_views: counts.short_views,
        long_views: counts.long_views,
        hates: counts.hates,
        ctr: rate(counts.clicks),
        svr: rate(counts.short_views),
        lvtr: rate(counts.long_views),
        htr: rate(counts.hates),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Machine,
    Base,
}

/// One notification for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PushRecord {
    pub video_id: String,
    pub push_id: String,
    pub text: String,
    pub caption: Option<String>,
    pub original_title: String,
    pub topics: Vec<String>,
    pub platform_category: String,
    pub tag_cluster: String,
    pub stats: EngagementStats,
    pub source: Source,
    pub timestamp: i64,
}

/// On-disk shape of a corpus line. Unknown fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordRow {
    pub video_id: String,
    pub push_id: String,
    pub text: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub original_title: String,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub platform_category: String,
    pub tag_cluster: String,
    pub pv: u64,
    pub clicks: u64,
    pub short_views: u64,
    pub long_views: u64,
    pub hates: u64,
    pub source: Source,
    pub timestamp: i64,
}

impl PushRecord {
    /// Validates a row and derives its rates.
    pub fn from_row(row: RecordRow) -> Result<Self, CorpusError> {
        let invalid = |message: String| CorpusError::Validation { push_id: row.push_id.clone(), message };
        if row.push_id.is_empty() {
            return Err(invalid("push_id is empty".into()));
        }
        if normalize_text(&row.text).is_empty() {
            return Err(invalid("text is empty after normalization".into()));
        }
        if row.tag_cluster.is_empty() {
            return Err(invalid("tag_cluster is empty".into()));
        }
        let counts = EventCounts {
            clicks: row.clicks,
            short_views: row.short_views,
            long_views: row.long_views,
            hates: row.hates,
        };
        let stats = derive_rates(counts, row.pv).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            video_id: row.video_id,
            push_id: row.push_id,
            text: row.text,
            caption: row.caption,
            original_title: row.original_title,
            topics: row.topics,
            platform_category: row.platform_category,
            tag_cluster: row.tag_cluster,
            stats,
            source: row.source,
            timestamp: row.timestamp,
        })
    }

    pub fn to_row(&self) -> RecordRow {
        RecordRow {
            video_id: self.video_id.clone(),
            push_id: self.push_id.clone(),
            text: self.text.clone(),
            caption: self.caption.clone(),
            original_title: self.original_title.clone(),
            topics: self.topics.clone(),
            platform_category: self.platform_category.clone(),
            tag_cluster: self.tag_cluster.clone(),
            pv: self.stats.pv,
            clicks: self.stats.clicks,
            short_views: self.stats.short_views,
            long_views: self.stats.long_views,
            hates: self.stats.hates,
            source: self.source,
            timestamp: self.timestamp,
        }
    }
}

impl Serialize for PushRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_row().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PushRecord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let row = RecordRow::deserialize(deserializer)?;
        PushRecord::from_row(row).map_err(serde::de::Error::custom)
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<PushRecord>, CorpusError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: RecordRow =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: lineno, message: e.to_string() })?;
        let record = PushRecord::from_row(row)?;
        if !seen.insert(record.push_id.clone()) {
            return Err(CorpusError::Duplicate { push_id: record.push_id, line: lineno });
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as JSONL, one LF-terminated line each.
pub fn write_corpus<W: Write>(mut writer: W, records: &[PushRecord]) -> Result<(), CorpusError> {
    for record in records {
        serde_json::to_writer(&mut writer, &record.to_row()).map_err(|e| CorpusError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(push_id: &str, clicks: u64, pv: u64) -> String {
        format!(
            r#"{{"video_id":"v1","push_id":"{push_id}","text":"Watch  this","caption":"a cat","original_title":"t","topics":["pets"],"platform_category":"animals","tag_cluster":"pets","pv":{pv},"clicks":{clicks},"short_views":1,"long_views":2,"hates":0,"source":"human","timestamp":1700000000}}"#
        )
    }

    #[test]
    fn derive_rates_single_division() {
        let s = derive_rates(EventCounts { clicks: 7, ..Default::default() }, 1000).unwrap();
        assert_eq!(s.ctr, 0.007);
        assert_eq!((s.svr, s.lvtr, s.htr), (0.0, 0.0, 0.0));
        assert_eq!(s.clicks, 7);
    }

    #[test]
    fn derive_rates_zero_counts() {
        let s = derive_rates(EventCounts::default(), 500).unwrap();
        assert_eq!((s.ctr, s.svr, s.lvtr, s.htr), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn derive_rates_rejects_count_above_pv() {
        let err = derive_rates(EventCounts { clicks: 10, ..Default::default() }, 5);
        assert!(matches!(err, Err(CorpusError::InvalidStats(_))));
    }

    #[test]
    fn derive_rates_never_served() {
        assert!(derive_rates(EventCounts::default(), 0).is_ok());
        let err = derive_rates(EventCounts { hates: 1, ..Default::default() }, 0);
        assert!(matches!(err, Err(CorpusError::InvalidStats(_))));
    }

    #[test]
    fn parses_one_line() {
        let recs = parse_corpus(line("p1", 7, 1000).as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.video_id, "v1");
        assert_eq!(r.push_id, "p1");
        assert_eq!(r.text, "Watch  this");
        assert_eq!(r.caption.as_deref(), Some("a cat"));
        assert_eq!(r.original_title, "t");
        assert_eq!(r.topics, vec!["pets".to_string()]);
        assert_eq!(r.platform_category, "animals");
        assert_eq!(r.tag_cluster, "pets");
        assert_eq!(r.stats.pv, 1000);
        assert_eq!(r.stats.clicks, 7);
        assert_eq!(r.stats.short_views, 1);
        assert_eq!(r.stats.long_views, 2);
        assert_eq!(r.stats.ctr, 0.007);
        assert_eq!(r.source, Source::Human);
        assert_eq!(r.timestamp, 1_700_000_000);
    }

    #[test]
    fn validation_error_names_push_id() {
        let err = parse_corpus(line("bad-one", 20, 10).as_bytes()).unwrap_err();
        match err {
            CorpusError::Validation { push_id, .. } => assert_eq!(push_id, "bad-one"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_fields_are_ignored() {
        let l = line("p1", 1, 10).replacen('{', r#"{"future_field":{"x":[1,2]},"#, 1);
        assert_eq!(parse_corpus(l.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = format!("{}\n{{not json\n", line("p1", 1, 10));
        match parse_corpus(input.as_bytes()).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_push_id_rejected() {
        let input = format!("{}\n{}\n", line("p1", 1, 10), line("p1", 2, 10));
        assert!(matches!(parse_corpus(input.as_bytes()), Err(CorpusError::Duplicate { line: 2, .. })));
    }

    #[test]
    fn blank_text_and_cluster_rejected() {
        let l = line("p1", 1, 10).replace("Watch  this", " \\t ");
        assert!(matches!(parse_corpus(l.as_bytes()), Err(CorpusError::Validation { .. })));
        let l = line("p1", 1, 10).replace(r#""tag_cluster":"pets""#, r#""tag_cluster":"""#);
        assert!(matches!(parse_corpus(l.as_bytes()), Err(CorpusError::Validation { .. })));
    }

    fn arb_record() -> impl Strategy<Value = PushRecord> {
        (
            "[a-z0-9]{1,8}",
            "[A-Za-z]{1,6}( [A-Za-z]{1,6}){0,4}",
            proptest::option::of("[ -~]{0,20}"),
            proptest::collection::vec("[a-z]{1,5}", 0..3),
            1u64..1_000_000,
            (0u64..=100, 0u64..=100, 0u64..=100, 0u64..=100),
            any::<i64>(),
        )
            .prop_map(|(id, text, caption, topics, pv, (c, s, l, h), ts)| {
                let frac = |x: u64| pv * x / 100;
                let counts = EventCounts { clicks: frac(c), short_views: frac(s), long_views: frac(l), hates: frac(h) };
                PushRecord {
                    video_id: format!("v{id}"),
                    push_id: id,
                    text,
                    caption,
                    original_title: "title".into(),
                    topics,
                    platform_category: "cat".into(),
                    tag_cluster: "k".into(),
                    stats: derive_rates(counts, pv).unwrap(),
                    source: Source::Machine,
                    timestamp: ts,
                }
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(rec in arb_record()) {
            let mut buf = Vec::new();
            write_corpus(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = parse_corpus(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }

        #[test]
        fn rates_are_scale_invariant(
            pv in 1u64..100_000,
            fracs in (0u64..=1000, 0u64..=1000, 0u64..=1000, 0u64..=1000),
            k in 1u64..1000,
        ) {
            let c = EventCounts {
                clicks: pv * fracs.0 / 1000,
                short_views: pv * fracs.1 / 1000,
                long_views: pv * fracs.2 / 1000,
                hates: pv * fracs.3 / 1000,
            };
            let scaled = EventCounts {
                clicks: c.clicks * k,
                short_views: c.short_views * k,
                long_views: c.long_views * k,
                hates: c.hates * k,
            };
            let a = derive_rates(c, pv).unwrap();
            let b = derive_rates(scaled, pv * k).unwrap();
            prop_assert_eq!((a.ctr, a.svr, a.lvtr, a.htr), (b.ctr, b.svr, b.lvtr, b.htr));
        }
    }
}
