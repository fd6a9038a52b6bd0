//! Parser for the entity/relation extraction grammar:
//!
//! ```text
//! ("entity"<|>NAME<|>TYPE<|>DESCRIPTION)##("relationship"<|>SRC<|>DST<|>DESCRIPTION<|>STRENGTH)##<|COMPLETE|>
//! ```
//!
//! Parsing is total: malformed records are skipped with positional warnings.

use std::collections::HashSet;
use std::fmt;

use chrono::{Datelike, Days, Months, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::model::CalendarDate;
use crate::text::collapse_whitespace;

pub const FIELD_SEP: &str = "<|>";
pub const RECORD_SEP: &str = "##";
pub const COMPLETE_MARKER: &str = "<|COMPLETE|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityType {
    User,
    Person,
    Object,
    Resource,
    Event,
    #[serde(rename = "Goal/Intention")]
    GoalIntention,
    Time,
    Statistic,
    Duration,
    Place,
    Organization,
    #[serde(rename = "Interest/Skill")]
    InterestSkill,
    Sentiment,
    Health,
    Behavior,
    Other,
}

impl EntityType {
    pub const ALL: [EntityType; 16] = [
        EntityType::User,
        EntityType::Person,
        EntityType::Object,
        EntityType::Resource,
        EntityType::Event,
        EntityType::GoalIntention,
        EntityType::Time,
        EntityType::Statistic,
        EntityType::Duration,
        EntityType::Place,
        EntityType::Organization,
        EntityType::InterestSkill,
        EntityType::Sentiment,
        EntityType::Health,
        EntityType::Behavior,
        EntityType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::User => "User",
            EntityType::Person => "Person",
            EntityType::Object => "Object",
            EntityType::Resource => "Resource",
            EntityType::Event => "Event",
            EntityType::GoalIntention => "Goal/Intention",
            EntityType::Time => "Time",
            EntityType::Statistic => "Statistic",
            EntityType::Duration => "Duration",
            EntityType::Place => "Place",
            EntityType::Organization => "Organization",
            EntityType::InterestSkill => "Interest/Skill",
            EntityType::Sentiment => "Sentiment",
            EntityType::Health => "Health",
            EntityType::Behavior => "Behavior",
            EntityType::Other => "Other",
        }
    }

    /// Case-insensitive vocabulary lookup.
    pub fn parse(raw: &str) -> Option<Self> {
        let needle = raw.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().to_ascii_lowercase() == needle)
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntity {
    pub name: String,
    pub etype: EntityType,
    pub description: String,
    /// Set for `Time` entities whose name is not a `YYYY/MM/DD` date.
    #[serde(default)]
    pub time_unresolved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRelation {
    pub source: String,
    pub target: String,
    pub description: String,
    pub strength: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub entities: Vec<RawEntity>,
    pub relations: Vec<RawRelation>,
    pub warnings: Vec<String>,
    pub complete_marker_seen: bool,
}

impl ParseReport {
    /// Equality ignoring warnings.
    pub fn same_content(&self, other: &ParseReport) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.complete_marker_seen == other.complete_marker_seen
    }
}

/// Uppercased, whitespace-collapsed entity name: the alignment key.
pub fn canonical_name(raw: &str) -> String {
    collapse_whitespace(raw).to_uppercase()
}

fn unquote(field: &str) -> &str {
    let t = field.trim();
    let stripped = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t);
    stripped.trim()
}

fn parse_strength(raw: &str) -> Option<f64> {
    let v: f64 = unquote(raw).parse().ok()?;
    v.is_finite().then_some(v)
}

pub fn parse_extraction(raw: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let body = match raw.find(COMPLETE_MARKER) {
        Some(pos) => {
            report.complete_marker_seen = true;
            &raw[..pos]
        }
        None => raw,
    };

    for (position, chunk) in body.split(RECORD_SEP).enumerate() {
        for record in split_line_records(chunk) {
            parse_record(position, record, &mut report);
        }
    }

    recover_implicit_entities(&mut report);
    report
}

/// Splits a chunk holding several complete records on separate lines, a
/// common variant when the model drops the record delimiter. Lines that do
/// not close a record stay attached to their neighbours.
fn split_line_records(chunk: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut offset = 0;
    for line in chunk.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let head = chunk[start..line_start].trim_end();
        if line.trim_start().starts_with('(') && head.ends_with(')') && head.contains('(') {
            out.push(&chunk[start..line_start]);
            start = line_start;
        }
    }
    out.push(&chunk[start..]);
    out
}

fn parse_record(position: usize, chunk: &str, report: &mut ParseReport) {
    let mut chunk = chunk.trim();
    if chunk.is_empty() {
        return;
    }
    // Models often put a sentence of prose before the first record.
    if !chunk.starts_with('(') && chunk.ends_with(')') {
        if let Some(start) = chunk.find('(') {
            report
                .warnings
                .push(format!("record {position}: ignored text before record"));
            chunk = &chunk[start..];
        }
    }
    let Some(inner) = chunk.strip_prefix('(').and_then(|c| c.strip_suffix(')')) else {
        report
            .warnings
            .push(format!("record {position}: not a parenthesised record"));
        return;
    };
    let fields: Vec<&str> = inner.split(FIELD_SEP).map(unquote).collect();
    match fields[0].to_ascii_lowercase().as_str() {
        "entity" => parse_entity(position, &fields, report),
        "relationship" | "relation" => parse_relation(position, &fields, report),
        other => report
            .warnings
            .push(format!("record {position}: unknown record tag {other:?}")),
    }
}

fn parse_entity(position: usize, fields: &[&str], report: &mut ParseReport) {
    if fields.len() < 4 {
        report.warnings.push(format!(
            "record {position}: record has {} fields, expected 4",
            fields.len()
        ));
        return;
    }
    let name = canonical_name(fields[1]);
    if name.is_empty() {
        report
            .warnings
            .push(format!("record {position}: empty entity name"));
        return;
    }
    let etype = EntityType::parse(fields[2]).unwrap_or_else(|| {
        report.warnings.push(format!(
            "record {position}: unknown entity type {:?}, using Other",
            fields[2]
        ));
        EntityType::Other
    });
    if fields.len() > 4 {
        report.warnings.push(format!(
            "record {position}: record has {} fields, expected 4; extra fields joined into description",
            fields.len()
        ));
    }
    let description = fields[3..].join(" ").trim().to_string();
    let time_unresolved = etype == EntityType::Time && name.parse::<CalendarDate>().is_err();
    if time_unresolved {
        report.warnings.push(format!(
            "record {position}: time entity {name:?} is not YYYY/MM/DD"
        ));
    }
    report.entities.push(RawEntity {
        name,
        etype,
        description,
        time_unresolved,
    });
}

fn parse_relation(position: usize, fields: &[&str], report: &mut ParseReport) {
    if fields.len() < 5 {
        report.warnings.push(format!(
            "record {position}: record has {} fields, expected 5",
            fields.len()
        ));
        return;
    }
    let source = canonical_name(fields[1]);
    let target = canonical_name(fields[2]);
    if source.is_empty() || target.is_empty() {
        report
            .warnings
            .push(format!("record {position}: empty relation endpoint"));
        return;
    }
    let last = fields.len() - 1;
    let Some(value) = parse_strength(fields[last]) else {
        report.warnings.push(format!(
            "record {position}: strength {:?} is not numeric",
            fields[last]
        ));
        return;
    };
    if fields.len() > 5 {
        report.warnings.push(format!(
            "record {position}: record has {} fields, expected 5; middle fields joined into description",
            fields.len()
        ));
    }
    let rounded = value.round();
    let clamped = rounded.clamp(1.0, 10.0);
    if clamped != rounded {
        report.warnings.push(format!(
            "record {position}: strength {value} clamped to {clamped}"
        ));
    }
    report.relations.push(RawRelation {
        source,
        target,
        description: fields[3..last].join(" ").trim().to_string(),
        strength: clamped as u8,
    });
}

fn recover_implicit_entities(report: &mut ParseReport) {
    let mut known: HashSet<String> = report.entities.iter().map(|e| e.name.clone()).collect();
    let mut implicit = Vec::new();
    for rel in &report.relations {
        for name in [&rel.source, &rel.target] {
            if known.insert(name.clone()) {
                report.warnings.push(format!(
                    "relation {} -> {} references undeclared entity {name:?}; added as Other",
                    rel.source, rel.target
                ));
                implicit.push(RawEntity {
                    name: name.clone(),
                    etype: EntityType::Other,
                    description: rel.description.clone(),
                    time_unresolved: false,
                });
            }
        }
    }
    report.entities.extend(implicit);
}

fn quote(field: &str) -> String {
    format!("\"{field}\"")
}

pub fn entity_record(entity: &RawEntity) -> String {
    format!(
        "({}{FIELD_SEP}{}{FIELD_SEP}{}{FIELD_SEP}{})",
        quote("entity"),
        quote(&entity.name),
        quote(entity.etype.as_str()),
        quote(&entity.description)
    )
}

pub fn relation_record(relation: &RawRelation) -> String {
    format!(
        "({}{FIELD_SEP}{}{FIELD_SEP}{}{FIELD_SEP}{}{FIELD_SEP}{})",
        quote("relationship"),
        quote(&relation.source),
        quote(&relation.target),
        quote(&relation.description),
        relation.strength
    )
}

/// Canonical serialisation: every field quoted, records joined by `##`.
pub fn serialize_report(report: &ParseReport) -> String {
    let mut records: Vec<String> = report.entities.iter().map(entity_record).collect();
    records.extend(report.relations.iter().map(relation_record));
    if report.complete_marker_seen {
        records.push(COMPLETE_MARKER.to_string());
    }
    records.join(RECORD_SEP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeResolution {
    Date(CalendarDate),
    Unresolved,
}

impl TimeResolution {
    pub fn date(self) -> Option<CalendarDate> {
        match self {
            TimeResolution::Date(d) => Some(d),
            TimeResolution::Unresolved => None,
        }
    }
}

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

fn month_number(word: &str) -> Option<u32> {
    let w = word.trim_end_matches('.');
    if w.len() < 3 {
        return None;
    }
    MONTHS
        .iter()
        .position(|m| *m == w || (w.len() >= 3 && m.starts_with(w) && (w.len() == 3 || w == "sept")))
        .map(|i| i as u32 + 1)
}

fn day_number(word: &str) -> Option<u32> {
    let digits = word
        .trim_end_matches("st")
        .trim_end_matches("nd")
        .trim_end_matches("rd")
        .trim_end_matches("th");
    let d: u32 = digits.parse().ok()?;
    (1..=31).contains(&d).then_some(d)
}

fn count_word(word: &str) -> Option<u64> {
    const WORDS: [&str; 12] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven",
    ];
    match word {
        "a" | "an" => Some(1),
        "twelve" => Some(12),
        _ => word
            .parse()
            .ok()
            .or_else(|| WORDS.iter().position(|w| *w == word).map(|i| i as u64)),
    }
}

/// Most recent valid `month/day` not after `anchor`.
fn nearest_past(month: u32, day: u32, anchor: NaiveDate) -> Option<NaiveDate> {
    (0..8)
        .filter_map(|back| NaiveDate::from_ymd_opt(anchor.year() - back, month, day))
        .find(|d| *d <= anchor)
}

/// Resolves a date phrase against the dialogue date. Recurring or vague
/// phrases are `Unresolved`.
///
/// Relative phrases: `today`, `yesterday`, `the day before yesterday`,
/// `N days ago`, `N weeks ago`, `last week` (7 days back), `last weekend`
/// (Saturday of the previous Monday-Sunday week), `last month` (one
/// calendar month back, day clamped), `N months ago`.
pub fn normalize_time(raw_phrase: &str, dialogue_time: CalendarDate) -> TimeResolution {
    let anchor = dialogue_time.naive();
    let phrase = raw_phrase
        .trim()
        .trim_end_matches(['.', ',', '!', '?'])
        .to_lowercase();
    let resolved = explicit_date(&phrase, anchor).or_else(|| relative_date(&phrase, anchor));
    match resolved {
        Some(d) => TimeResolution::Date(CalendarDate(d)),
        None => TimeResolution::Unresolved,
    }
}

fn explicit_date(phrase: &str, anchor: NaiveDate) -> Option<NaiveDate> {
    if let Ok(d) = phrase.parse::<CalendarDate>() {
        return Some(d.naive());
    }
    let words: Vec<&str> = phrase
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty() && *w != "of" && *w != "the" && *w != "on")
        .collect();
    let (month, day, rest) = match words.as_slice() {
        [m, d, rest @ ..] if month_number(m).is_some() && day_number(d).is_some() => {
            (month_number(m)?, day_number(d)?, rest)
        }
        [d, m, rest @ ..] if day_number(d).is_some() && month_number(m).is_some() => {
            (month_number(m)?, day_number(d)?, rest)
        }
        _ => return None,
    };
    match rest {
        [] => nearest_past(month, day, anchor),
        [year] => {
            let y: i32 = year.parse().ok()?;
            NaiveDate::from_ymd_opt(y, month, day)
        }
        _ => None,
    }
}

fn relative_date(phrase: &str, anchor: NaiveDate) -> Option<NaiveDate> {
    match phrase {
        "today" | "this morning" | "this afternoon" | "this evening" | "tonight" => {
            return Some(anchor)
        }
        "yesterday" | "last night" => return anchor.checked_sub_days(Days::new(1)),
        "the day before yesterday" | "day before yesterday" => {
            return anchor.checked_sub_days(Days::new(2))
        }
        "last week" | "a week ago" => return anchor.checked_sub_days(Days::new(7)),
        "last weekend" => {
            let monday = anchor.checked_sub_days(Days::new(
                anchor.weekday().num_days_from_monday() as u64,
            ))?;
            let previous_monday = monday.checked_sub_days(Days::new(7))?;
            return previous_monday
                .checked_add_days(Days::new(Weekday::Sat.num_days_from_monday() as u64));
        }
        "last month" | "a month ago" => return anchor.checked_sub_months(Months::new(1)),
        _ => {}
    }
    let words: Vec<&str> = phrase.split_whitespace().collect();
    if let [n, unit, "ago"] = words.as_slice() {
        let n = count_word(n)?;
        return match unit.trim_end_matches('s') {
            "day" => anchor.checked_sub_days(Days::new(n)),
            "week" => anchor.checked_sub_days(Days::new(n * 7)),
            "month" => anchor.checked_sub_months(Months::new(u32::try_from(n).ok()?)),
            _ => None,
        };
    }
    None
}
