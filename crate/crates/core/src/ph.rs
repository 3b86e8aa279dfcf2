//! Named-entity placeholder pipeline: recognize entities (regex + user
//! lexicon), cross-validate across parallel data via alignments, substitute
//! placeholder tokens for training, and restore original values (or provided
//! translations) at decode time, with pluggable structural value rules for
//! locale-dependent entities.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;

use crate::align::AlignmentMatrix;
use crate::error::{Error, Result};

/// The placeholder entity types. `token()` yields the vocabulary token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    Numeric,
    NumexMeasurement,
    NumexMoney,
    Person,
    PersonTitle,
    PersonFirstname,
    PersonInitials,
    PersonLastname,
    PersonMiddlename,
    Location,
    Organization,
    Product,
    Suffix,
    TimexExpression,
    Date,
    DateDay,
    DateMonth,
    DateYear,
    Hour,
    Url,
}

pub const ALL_ENTITY_TYPES: [EntityType; 20] = [
    EntityType::Numeric,
    EntityType::NumexMeasurement,
    EntityType::NumexMoney,
    EntityType::Person,
    EntityType::PersonTitle,
    EntityType::PersonFirstname,
    EntityType::PersonInitials,
    EntityType::PersonLastname,
    EntityType::PersonMiddlename,
    EntityType::Location,
    EntityType::Organization,
    EntityType::Product,
    EntityType::Suffix,
    EntityType::TimexExpression,
    EntityType::Date,
    EntityType::DateDay,
    EntityType::DateMonth,
    EntityType::DateYear,
    EntityType::Hour,
    EntityType::Url,
];

impl EntityType {
    pub fn token(self) -> &'static str {
        match self {
            EntityType::Numeric => "__ent_numeric",
            EntityType::NumexMeasurement => "__ent_numex_measurement",
            EntityType::NumexMoney => "__ent_numex_money",
            EntityType::Person => "__ent_person",
            EntityType::PersonTitle => "__ent_person_title",
            EntityType::PersonFirstname => "__ent_person_firstname",
            EntityType::PersonInitials => "__ent_person_initials",
            EntityType::PersonLastname => "__ent_person_lastname",
            EntityType::PersonMiddlename => "__ent_person_middlename",
            EntityType::Location => "__ent_location",
            EntityType::Organization => "__ent_organization",
            EntityType::Product => "__ent_product",
            EntityType::Suffix => "__ent_suffix",
            EntityType::TimexExpression => "__ent_timex_expression",
            EntityType::Date => "__ent_date",
            EntityType::DateDay => "__ent_date_day",
            EntityType::DateMonth => "__ent_date_month",
            EntityType::DateYear => "__ent_date_year",
            EntityType::Hour => "__ent_hour",
            EntityType::Url => "__ent_url",
        }
    }

    /// Short name, as used in lexicon files and substitution records
    /// (the token without its "__ent_" prefix).
    pub fn name(self) -> &'static str {
        &self.token()["__ent_".len()..]
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = Error;
    fn from_str(s: &str) -> Result<EntityType> {
        let name = s.strip_prefix("__ent_").unwrap_or(s);
        ALL_ENTITY_TYPES
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown entity type: {s}")))
    }
}

/// A recognized entity: token range `[start, end)` within the sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub ty: EntityType,
    pub start: usize,
    pub end: usize,
    pub value: String,
    pub translation: Option<String>,
}

/// User-supplied entity lexicon, loaded from "surface<TAB>type[<TAB>translation]"
/// lines. Surfaces may span several tokens (space-separated in the file).
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    /// surface token sequence -> (type, optional translation)
    entries: HashMap<Vec<String>, (EntityType, Option<String>)>,
    max_tokens: usize,
}

impl Lexicon {
    pub fn new() -> Lexicon {
        Lexicon::default()
    }

    pub fn insert(&mut self, surface: &str, ty: EntityType, translation: Option<String>) {
        let toks: Vec<String> = surface.split_whitespace().map(String::from).collect();
        if toks.is_empty() {
            return;
        }
        self.max_tokens = self.max_tokens.max(toks.len());
        self.entries.insert(toks, (ty, translation));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_text(text: &str) -> Result<Lexicon> {
        let mut lex = Lexicon::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let surface = fields
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Parse(format!("lexicon line {}: empty surface", i + 1)))?;
            let ty: EntityType = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("lexicon line {}: missing type", i + 1)))?
                .parse()
                .map_err(|e| Error::Parse(format!("lexicon line {}: {e}", i + 1)))?;
            let translation = fields.next().map(String::from);
            lex.insert(surface, ty, translation);
        }
        Ok(lex)
    }
}

/// Compiled regex recognizers, shared across sentences.
pub struct Recognizer {
    lexicon: Lexicon,
    url: Regex,
    hour: Regex,
    money: Regex,
    measurement: Regex,
    date: Regex,
    date_year: Regex,
    numeric: Regex,
    months: [&'static str; 12],
}

impl Recognizer {
    pub fn new(lexicon: Lexicon) -> Recognizer {
        Recognizer {
            lexicon,
            url: Regex::new(r"^(https?://|www\.)\S+$").unwrap(),
            hour: Regex::new(r"^([01]?\d|2[0-3]):[0-5]\d(:[0-5]\d)?$|^\d{1,2}(am|pm|AM|PM)$")
                .unwrap(),
            money: Regex::new(r"^[$€£¥₩]\d[\d.,]*$|^\d[\d.,]*[$€£¥₩]$").unwrap(),
            measurement: Regex::new(
                r"^\d[\d.,]*(km|cm|mm|kg|mg|ml|kl|m|g|l|kw|mph|kph|ft|lb|oz|%|°[CF]?)$",
            )
            .unwrap(),
            date: Regex::new(r"^\d{4}-\d{2}-\d{2}$|^\d{1,2}/\d{1,2}/\d{2,4}$").unwrap(),
            date_year: Regex::new(r"^(1[5-9]\d{2}|20\d{2})$").unwrap(),
            numeric: Regex::new(r"^\d+([.,]\d+)*$").unwrap(),
            months: [
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
            ],
        }
    }

    fn classify(&self, tok: &str) -> Option<EntityType> {
        if self.url.is_match(tok) {
            Some(EntityType::Url)
        } else if self.hour.is_match(tok) {
            Some(EntityType::Hour)
        } else if self.money.is_match(tok) {
            Some(EntityType::NumexMoney)
        } else if self.measurement.is_match(tok) {
            Some(EntityType::NumexMeasurement)
        } else if self.date.is_match(tok) {
            Some(EntityType::Date)
        } else if self.date_year.is_match(tok) {
            Some(EntityType::DateYear)
        } else if self.months.contains(&tok.to_lowercase().as_str()) {
            Some(EntityType::DateMonth)
        } else if self.numeric.is_match(tok) {
            Some(EntityType::Numeric)
        } else {
            None
        }
    }

    /// Left-to-right, non-overlapping spans. At each position the lexicon is
    /// tried first (longest match), then the regexes.
    pub fn recognize(&self, tokens: &[String]) -> Vec<EntitySpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            // longest lexicon match starting at i
            let mut matched = false;
            let max_n = self.lexicon.max_tokens.min(tokens.len() - i);
            for n in (1..=max_n).rev() {
                if let Some((ty, tr)) = self.lexicon.entries.get(&tokens[i..i + n]) {
                    spans.push(EntitySpan {
                        ty: *ty,
                        start: i,
                        end: i + n,
                        value: tokens[i..i + n].join(" "),
                        translation: tr.clone(),
                    });
                    i += n;
                    matched = true;
                    break;
                }
            }
            if matched {
                continue;
            }
            if let Some(ty) = self.classify(&tokens[i]) {
                spans.push(EntitySpan {
                    ty,
                    start: i,
                    end: i + 1,
                    value: tokens[i].clone(),
                    translation: None,
                });
            }
            i += 1;
        }
        spans
    }
}

/// A pair validates iff the types match and at least one alignment link
/// connects the two token ranges. Each target span validates at most one
/// source span (first come, in source order).
pub fn cross_validate(
    src_spans: &[EntitySpan],
    tgt_spans: &[EntitySpan],
    alignment: &AlignmentMatrix,
) -> Vec<(EntitySpan, EntitySpan)> {
    let mut used = vec![false; tgt_spans.len()];
    let mut out = Vec::new();
    for s in src_spans {
        for (ti, t) in tgt_spans.iter().enumerate() {
            if used[ti] || t.ty != s.ty {
                continue;
            }
            let linked = alignment
                .links()
                .iter()
                .any(|&(a, b)| (s.start..s.end).contains(&a) && (t.start..t.end).contains(&b));
            if linked {
                used[ti] = true;
                out.push((s.clone(), t.clone()));
                break;
            }
        }
    }
    out
}

/// One substituted entity, in occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubRecord {
    /// Token position of the placeholder in the substituted sentence.
    pub idx: usize,
    pub ty: EntityType,
    pub value: String,
    pub translation: Option<String>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace(':', "\\c")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('c') => out.push(':'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Sidecar line format: one field per entity, tab-separated; each field is
/// "idx:type:value[:translation]" with ':' escaped as "\c" inside values.
pub fn records_to_line(records: &[SubRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let mut f = format!("{}:{}:{}", r.idx, r.ty.name(), escape(&r.value));
            if let Some(tr) = &r.translation {
                f.push(':');
                f.push_str(&escape(tr));
            }
            f
        })
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn records_from_line(line: &str) -> Result<Vec<SubRecord>> {
    if line.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for field in line.split('\t') {
        // split on unescaped ':'
        let mut parts: Vec<String> = Vec::new();
        let mut cur = String::new();
        let mut it = field.chars();
        while let Some(c) = it.next() {
            match c {
                ':' => parts.push(std::mem::take(&mut cur)),
                '\\' => {
                    cur.push('\\');
                    if let Some(n) = it.next() {
                        cur.push(n);
                    }
                }
                _ => cur.push(c),
            }
        }
        parts.push(cur);
        if parts.len() < 3 || parts.len() > 4 {
            return Err(Error::Parse(format!("bad substitution record: {field}")));
        }
        let idx: usize = parts[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad substitution index: {}", parts[0])))?;
        let ty: EntityType = parts[1].parse()?;
        out.push(SubRecord {
            idx,
            ty,
            value: unescape(&parts[2]),
            translation: parts.get(3).map(|s| unescape(s)),
        });
    }
    Ok(out)
}

/// Replace each span with its placeholder token. Spans must be
/// non-overlapping; overlap is an error.
pub fn substitute(
    tokens: &[String],
    spans: &[EntitySpan],
) -> Result<(Vec<String>, Vec<SubRecord>)> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Invalid(format!(
                "overlapping entity spans [{}, {}) and [{}, {})",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    if let Some(last) = sorted.last() {
        if last.end > tokens.len() || last.start == last.end {
            return Err(Error::Invalid("entity span out of range or empty".into()));
        }
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut records = Vec::with_capacity(sorted.len());
    let mut pos = 0;
    for span in sorted {
        out.extend(tokens[pos..span.start].iter().cloned());
        records.push(SubRecord {
            idx: out.len(),
            ty: span.ty,
            value: span.value.clone(),
            translation: span.translation.clone(),
        });
        out.push(span.ty.token().to_string());
        pos = span.end;
    }
    out.extend(tokens[pos..].iter().cloned());
    Ok((out, records))
}

/// A structural value rule rewrites the restored token sequence in place
/// (locale-dependent transformations like digit regrouping).
pub type ValueRule = fn(&mut Vec<String>);

/// Join a restored number with an immediately following 억/만 magnitude token
/// into one token ("1.4 억" -> "1.4억").
pub fn fuse_numeric_unit(tokens: &mut Vec<String>) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        let is_num = tokens[i]
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == ',')
            && tokens[i].chars().any(|c| c.is_ascii_digit());
        if is_num && (tokens[i + 1] == "억" || tokens[i + 1] == "만") {
            let unit = tokens.remove(i + 1);
            tokens[i].push_str(&unit);
        }
        i += 1;
    }
}

/// English "billion" values re-expressed against the 억 (10^8) unit must be
/// shifted one decimal place: "1.4 억" -> "14억", "25 억" -> "250억".
/// Applies to a number immediately followed by 억 and fuses the pair.
pub fn regroup_digits_for_eok(tokens: &mut Vec<String>) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        if tokens[i + 1] == "억" {
            if let Some(shifted) = shift_decimal_right(&tokens[i], 1) {
                tokens[i] = shifted;
                tokens.remove(i + 1);
                tokens[i].push_str("억");
            }
        }
        i += 1;
    }
}

/// Move the decimal point of a plain decimal string `k` places right,
/// padding with zeros; returns None if the string is not a plain decimal.
fn shift_decimal_right(s: &str, k: usize) -> Option<String> {
    let (int, frac) = match s.split_once('.') {
        Some((a, b)) => (a, b),
        None => (s, ""),
    };
    if int.is_empty()
        || !int.chars().all(|c| c.is_ascii_digit())
        || !frac.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let mut digits: String = int.to_string();
    let mut frac = frac.to_string();
    for _ in 0..k {
        if frac.is_empty() {
            digits.push('0');
        } else {
            digits.push(frac.remove(0));
        }
    }
    let mut out = digits.trim_start_matches('0').to_string();
    if out.is_empty() {
        out.push('0');
    }
    if !frac.is_empty() {
        out.push('.');
        out.push_str(&frac);
    }
    Some(out)
}

#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub tokens: Vec<String>,
    /// Count of target placeholders with no same-type source occurrence;
    /// those were replaced by the `<unk>` policy token.
    pub unmatched: usize,
}

/// Restore placeholder values in decoded target tokens.
///
/// The k-th emitted placeholder of a type maps to the same-type source
/// occurrence with maximal attention at its emission step; when attention is
/// unavailable or ambiguous, same-type occurrence order is the fallback. A
/// provided translation is preferred over the raw source value. A target
/// placeholder with no same-type source occurrence becomes `<unk>` and is
/// counted in `unmatched`. Structural `rules` run last, in order.
pub fn restore(
    tgt_tokens: &[String],
    records: &[SubRecord],
    attention: &[Vec<f64>],
    rules: &[ValueRule],
) -> RestoreOutput {
    let mut used = vec![false; records.len()];
    let mut out = Vec::with_capacity(tgt_tokens.len());
    let mut unmatched = 0;
    for (t, tok) in tgt_tokens.iter().enumerate() {
        let ty = match tok.parse::<EntityType>() {
            Ok(ty) if crate::vocab::is_placeholder_token(tok) => ty,
            _ => {
                out.push(tok.clone());
                continue;
            }
        };
        // candidates: unused same-type source records
        let mut chosen: Option<usize> = None;
        if let Some(attn) = attention.get(t) {
            let mut best = f64::NEG_INFINITY;
            for (ri, r) in records.iter().enumerate() {
                if used[ri] || r.ty != ty {
                    continue;
                }
                let a = attn.get(r.idx).copied().unwrap_or(f64::NEG_INFINITY);
                if a > best {
                    best = a;
                    chosen = Some(ri);
                }
            }
        }
        if chosen.is_none() {
            chosen = records
                .iter()
                .enumerate()
                .position(|(ri, r)| !used[ri] && r.ty == ty);
        }
        match chosen {
            Some(ri) => {
                used[ri] = true;
                let r = &records[ri];
                out.push(r.translation.clone().unwrap_or_else(|| r.value.clone()));
            }
            None => {
                unmatched += 1;
                out.push(crate::vocab::RESERVED[crate::vocab::UNK as usize].to_string());
            }
        }
    }
    for rule in rules {
        rule(&mut out);
    }
    RestoreOutput {
        tokens: out,
        unmatched,
    }
}
