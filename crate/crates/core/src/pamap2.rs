//! PAMAP2 subject-file parsing and MET-based intensity labeling.
//!
//! A subject file has one sample per line: 54 space-separated columns at
//! 100 Hz, `NaN` for missing values. Columns are timestamp, activity ID,
//! heart rate, then three 17-column IMU blocks (hand, chest, ankle). Within
//! a block: temperature, ±16g accelerometer (x,y,z), ±6g accelerometer,
//! gyroscope, magnetometer, 4 orientation columns. We keep the ±16g
//! accelerometer (the ±6g one saturates during vigorous motion) and the
//! gyroscope; everything else is parsed positionally and discarded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

/// Activity codes that occur in PAMAP2 recordings (0 = transient segments
/// between activities).
pub const ACTIVITY_IDS: [u16; 19] = [
    0, 1, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 16, 17, 18, 19, 20, 24,
];

const COLUMNS: usize = 54;

#[derive(Debug, Error)]
pub enum Pamap2Error {
    #[error("expected {COLUMNS} columns, found {found}")]
    ColumnCount { found: usize },
    #[error("token {token:?} is not a number or NaN")]
    NumberFormat { token: String },
    #[error("activity code {code} is not a PAMAP2 activity")]
    UnknownActivityCode { code: i64 },
    #[error("timestamp {value} must be finite and non-negative")]
    Timestamp { value: f64 },
    #[error("{path}:{line}: {source}")]
    Line {
        path: String,
        line: usize,
        source: Box<Pamap2Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("MET value {met} out of domain (must be > 0)")]
    Domain { met: f64 },
    #[error("activity {activity_id} missing from MET table")]
    UnknownActivity { activity_id: u16 },
    #[error("MET table: {0}")]
    Table(String),
}

/// Physical-activity level by MET thresholds: Low <= 3 < Medium <= 6 < High.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntensityLevel {
    Low,
    Medium,
    High,
}

impl IntensityLevel {
    pub const ALL: [IntensityLevel; 3] = [
        IntensityLevel::Low,
        IntensityLevel::Medium,
        IntensityLevel::High,
    ];

    pub fn index(self) -> usize {
        match self {
            IntensityLevel::Low => 0,
            IntensityLevel::Medium => 1,
            IntensityLevel::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<IntensityLevel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IntensityLevel::Low => "low",
            IntensityLevel::Medium => "medium",
            IntensityLevel::High => "high",
        }
    }
}

/// One IMU: ±16g accelerometer and gyroscope triplets, components possibly
/// missing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBlock {
    pub accel: [Option<f64>; 3],
    pub gyro: [Option<f64>; 3],
}

/// One parsed dataset row (the retained columns of it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub timestamp: f64,
    pub activity_id: u16,
    pub heart_rate: Option<f64>,
    pub imu_wrist: ImuBlock,
    pub imu_chest: ImuBlock,
    pub imu_ankle: ImuBlock,
}

fn parse_value(token: &str) -> Result<Option<f64>, Pamap2Error> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(_) => Err(Pamap2Error::NumberFormat {
            token: token.to_string(),
        }),
    }
}

fn parse_block(tokens: &[&str], start: usize) -> Result<ImuBlock, Pamap2Error> {
    // Block layout: temp, accel ±16g x3, accel ±6g x3, gyro x3, mag x3,
    // orientation x4. Offsets below skip the temperature column.
    let mut block = ImuBlock::default();
    for i in 0..3 {
        block.accel[i] = parse_value(tokens[start + 1 + i])?;
        block.gyro[i] = parse_value(tokens[start + 7 + i])?;
    }
    // Remaining columns are validated but not retained.
    for i in [0usize, 4, 5, 6, 10, 11, 12, 13, 14, 15, 16] {
        parse_value(tokens[start + i])?;
    }
    Ok(block)
}

pub fn parse_line(line: &str) -> Result<SampleRecord, Pamap2Error> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != COLUMNS {
        return Err(Pamap2Error::ColumnCount {
            found: tokens.len(),
        });
    }
    let timestamp = match parse_value(tokens[0])? {
        Some(v) if v >= 0.0 => v,
        Some(v) => return Err(Pamap2Error::Timestamp { value: v }),
        None => return Err(Pamap2Error::Timestamp { value: f64::NAN }),
    };
    let code: i64 = tokens[1].parse().map_err(|_| Pamap2Error::NumberFormat {
        token: tokens[1].to_string(),
    })?;
    if !ACTIVITY_IDS.iter().any(|id| i64::from(*id) == code) {
        return Err(Pamap2Error::UnknownActivityCode { code });
    }
    Ok(SampleRecord {
        timestamp,
        activity_id: code as u16,
        heart_rate: parse_value(tokens[2])?,
        imu_wrist: parse_block(&tokens, 3)?,
        imu_chest: parse_block(&tokens, 20)?,
        imu_ankle: parse_block(&tokens, 37)?,
    })
}

/// Inverse of [`parse_line`] on the retained columns; discarded columns
/// render as `NaN`.
pub fn render_line(record: &SampleRecord) -> String {
    fn opt(v: Option<f64>) -> String {
        match v {
            Some(v) => format!("{v}"),
            None => "NaN".to_string(),
        }
    }
    let mut cols = vec!["NaN".to_string(); COLUMNS];
    cols[0] = format!("{}", record.timestamp);
    cols[1] = format!("{}", record.activity_id);
    cols[2] = opt(record.heart_rate);
    for (start, imu) in [
        (3, &record.imu_wrist),
        (20, &record.imu_chest),
        (37, &record.imu_ankle),
    ] {
        for i in 0..3 {
            cols[start + 1 + i] = opt(imu.accel[i]);
            cols[start + 7 + i] = opt(imu.gyro[i]);
        }
    }
    let mut line = String::new();
    for (i, c) in cols.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{c}");
    }
    line
}

fn annotate(path: &Path, e: std::io::Error) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

/// Loads every line of a subject file, in file order. Any malformed line
/// aborts the load with a path:line annotated error.
pub fn load_subject(path: &Path) -> Result<Vec<SampleRecord>, Pamap2Error> {
    let file = std::fs::File::open(path).map_err(|e| annotate(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let record = parse_line(&line).map_err(|source| Pamap2Error::Line {
            path: path.display().to_string(),
            line: i + 1,
            source: Box::new(source),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Map from activity ID to MET value, loaded from a data file so the
/// activity-to-intensity assignment stays inspectable and editable.
#[derive(Debug, Clone, Default)]
pub struct MetTable {
    entries: BTreeMap<u16, (f64, String)>,
}

impl MetTable {
    /// Parses `activity_id<TAB>met<TAB>name` rows; `#` starts a comment line.
    pub fn from_reader(reader: impl BufRead) -> Result<MetTable, Pamap2Error> {
        let mut entries = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let row = line.trim();
            if row.is_empty() || row.starts_with('#') {
                continue;
            }
            let mut fields = row.splitn(3, '\t');
            let bad = |msg: &str| Pamap2Error::Table(format!("row {}: {msg}", i + 1));
            let id: u16 = fields
                .next()
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| bad("activity id is not an integer"))?;
            if id == 0 {
                return Err(bad("activity 0 (transient) cannot have a MET value"));
            }
            let met: f64 = fields
                .next()
                .ok_or_else(|| bad("missing MET column"))?
                .trim()
                .parse()
                .map_err(|_| bad("MET value is not a number"))?;
            if !met.is_finite() || met <= 0.0 {
                return Err(Pamap2Error::Domain { met });
            }
            let name = fields.next().unwrap_or("").trim().to_string();
            if entries.insert(id, (met, name)).is_some() {
                return Err(bad("duplicate activity id"));
            }
        }
        Ok(MetTable { entries })
    }

    pub fn from_file(path: &Path) -> Result<MetTable, Pamap2Error> {
        let file = std::fs::File::open(path).map_err(|e| annotate(path, e))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn met(&self, activity_id: u16) -> Option<f64> {
        self.entries.get(&activity_id).map(|(met, _)| *met)
    }

    pub fn name(&self, activity_id: u16) -> Option<&str> {
        self.entries
            .get(&activity_id)
            .map(|(_, name)| name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.entries.keys().copied()
    }
}

/// Low for MET <= 3, Medium for 3 < MET <= 6, High above.
pub fn met_to_level(met: f64) -> Result<IntensityLevel, Pamap2Error> {
    if !met.is_finite() || met <= 0.0 {
        return Err(Pamap2Error::Domain { met });
    }
    Ok(if met <= 3.0 {
        IntensityLevel::Low
    } else if met <= 6.0 {
        IntensityLevel::Medium
    } else {
        IntensityLevel::High
    })
}

pub fn activity_to_level(
    activity_id: u16,
    table: &MetTable,
) -> Result<IntensityLevel, Pamap2Error> {
    let met = table
        .met(activity_id)
        .ok_or(Pamap2Error::UnknownActivity { activity_id })?;
    met_to_level(met)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn line_with(values: impl Fn(usize) -> String) -> String {
        (0..COLUMNS).map(values).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn parse_line_column_index_oracle() {
        // Token i carries the value i, so every retained field directly
        // reveals which column it was read from.
        let line = line_with(|i| format!("{i}"));
        let r = parse_line(&line).unwrap();
        assert_eq!(r.timestamp, 0.0);
        assert_eq!(r.activity_id, 1);
        assert_eq!(r.heart_rate, Some(2.0));
        assert_eq!(r.imu_wrist.accel, [Some(4.0), Some(5.0), Some(6.0)]);
        assert_eq!(r.imu_wrist.gyro, [Some(10.0), Some(11.0), Some(12.0)]);
        assert_eq!(r.imu_chest.accel, [Some(21.0), Some(22.0), Some(23.0)]);
        assert_eq!(r.imu_chest.gyro, [Some(27.0), Some(28.0), Some(29.0)]);
        assert_eq!(r.imu_ankle.accel, [Some(38.0), Some(39.0), Some(40.0)]);
        assert_eq!(r.imu_ankle.gyro, [Some(44.0), Some(45.0), Some(46.0)]);
    }

    #[test]
    fn parse_line_constructed_sample() {
        let line = line_with(|i| match i {
            0 => "8.38".to_string(),
            1 => "1".to_string(),
            _ => "0.0".to_string(),
        });
        let r = parse_line(&line).unwrap();
        assert_eq!(r.timestamp, 8.38);
        assert_eq!(r.activity_id, 1);
        assert_eq!(r.imu_wrist.accel, [Some(0.0); 3]);
        assert_eq!(r.imu_ankle.gyro, [Some(0.0); 3]);
    }

    #[test]
    fn nan_tokens_become_missing() {
        let line = line_with(|i| match i {
            0 => "1.0".to_string(),
            1 => "4".to_string(),
            _ => "NaN".to_string(),
        });
        let r = parse_line(&line).unwrap();
        assert_eq!(r.heart_rate, None);
        assert_eq!(r.imu_wrist.accel, [None; 3]);
        assert_eq!(r.imu_chest.gyro, [None; 3]);
    }

    #[test]
    fn wrong_column_count_rejected() {
        let line = (0..53).map(|_| "0").collect::<Vec<_>>().join(" ");
        assert!(matches!(
            parse_line(&line),
            Err(Pamap2Error::ColumnCount { found: 53 })
        ));
    }

    #[test]
    fn bad_token_and_bad_activity_rejected() {
        let garbage = line_with(|i| if i == 5 { "abc".into() } else { "0.0".into() });
        // Column 1 parses as activity 0 here, which is fine; column 5 is not.
        assert!(matches!(
            parse_line(&garbage),
            Err(Pamap2Error::NumberFormat { .. })
        ));
        let unknown = line_with(|i| if i == 1 { "8".into() } else { "0.0".into() });
        assert!(matches!(
            parse_line(&unknown),
            Err(Pamap2Error::UnknownActivityCode { code: 8 })
        ));
        let negative_ts = line_with(|i| if i == 0 { "-1.0".into() } else { "0".into() });
        assert!(matches!(
            parse_line(&negative_ts),
            Err(Pamap2Error::Timestamp { .. })
        ));
    }

    #[test]
    fn load_subject_orders_and_annotates() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let good = line_with(|i| match i {
            0 => "1.5".into(),
            1 => "4".into(),
            _ => "0.25".into(),
        });
        writeln!(f, "{good}").unwrap();
        writeln!(f, "{good}").unwrap();
        writeln!(f, "{good}").unwrap();
        let records = load_subject(f.path()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.activity_id == 4));

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "{good}").unwrap();
        writeln!(bad, "not a line").unwrap();
        let err = load_subject(bad.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");

        let empty = tempfile::NamedTempFile::new().unwrap();
        assert!(load_subject(empty.path()).unwrap().is_empty());
    }

    #[test]
    fn met_thresholds_match_contract() {
        assert_eq!(met_to_level(3.0).unwrap(), IntensityLevel::Low);
        assert_eq!(met_to_level(6.0).unwrap(), IntensityLevel::Medium);
        assert_eq!(met_to_level(7.5).unwrap(), IntensityLevel::High);
        assert_eq!(met_to_level(0.1).unwrap(), IntensityLevel::Low);
        assert!(matches!(met_to_level(0.0), Err(Pamap2Error::Domain { .. })));
        assert!(matches!(
            met_to_level(-2.0),
            Err(Pamap2Error::Domain { .. })
        ));
        assert!(met_to_level(f64::INFINITY).is_err());
    }

    #[test]
    fn shipped_met_table_covers_all_activities() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/pamap2_met.tsv");
        let table = MetTable::from_file(Path::new(path)).unwrap();
        for id in ACTIVITY_IDS.iter().filter(|id| **id != 0) {
            assert!(table.met(*id).is_some(), "activity {id} missing");
        }
        // The class memberships the labeling contract fixes.
        use IntensityLevel::*;
        for (id, want) in [
            (1, Low),
            (2, Low),
            (9, Low),
            (4, Medium),
            (6, Medium),
            (16, Medium),
            (17, Medium),
            (18, Medium),
            (19, Medium),
            (5, High),
            (20, High),
            (24, High),
        ] {
            assert_eq!(
                activity_to_level(id, &table).unwrap(),
                want,
                "activity {id}"
            );
        }
    }

    #[test]
    fn met_table_rejects_bad_rows() {
        let parse = |s: &str| MetTable::from_reader(std::io::Cursor::new(s.to_string()));
        assert!(parse("1\t-1.0\tlying").is_err());
        assert!(parse("0\t1.0\ttransient").is_err());
        assert!(parse("1\t1.0\ta\n1\t2.0\tb").is_err());
        assert!(parse("x\t1.0\ta").is_err());
        assert!(parse("1\tfast\ta").is_err());
        let ok = parse("# comment\n\n1\t1.3\tlying\n5\t8.0\trunning").unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok.met(5), Some(8.0));
        assert_eq!(ok.name(1), Some("lying"));
    }

    #[test]
    fn unknown_activity_lookup_fails() {
        let table = MetTable::from_reader(std::io::Cursor::new("1\t1.3\tlying")).unwrap();
        assert!(matches!(
            activity_to_level(4, &table),
            Err(Pamap2Error::UnknownActivity { activity_id: 4 })
        ));
    }

    fn arb_opt() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![
            3 => (-100.0f64..100.0).prop_map(Some),
            1 => Just(None),
        ]
    }

    fn arb_block() -> impl Strategy<Value = ImuBlock> {
        (
            prop::array::uniform3(arb_opt()),
            prop::array::uniform3(arb_opt()),
        )
            .prop_map(|(accel, gyro)| ImuBlock { accel, gyro })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            timestamp in 0.0f64..1e6,
            activity in prop::sample::select(ACTIVITY_IDS.to_vec()),
            heart_rate in arb_opt(),
            wrist in arb_block(),
            chest in arb_block(),
            ankle in arb_block(),
        ) {
            let record = SampleRecord {
                timestamp,
                activity_id: activity,
                heart_rate,
                imu_wrist: wrist,
                imu_chest: chest,
                imu_ankle: ankle,
            };
            let parsed = parse_line(&render_line(&record)).unwrap();
            prop_assert_eq!(parsed, record);
        }

        #[test]
        fn met_to_level_is_monotone(a in 0.001f64..20.0, b in 0.001f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(met_to_level(lo).unwrap() <= met_to_level(hi).unwrap());
        }

        #[test]
        fn every_positive_met_has_exactly_one_level(met in 0.001f64..50.0) {
            let level = met_to_level(met).unwrap();
            let by_range = [met <= 3.0, met > 3.0 && met <= 6.0, met > 6.0];
            prop_assert_eq!(by_range.iter().filter(|x| **x).count(), 1);
            prop_assert!(by_range[level.index()]);
        }
    }
}
