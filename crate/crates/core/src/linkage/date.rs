use chrono::NaiveDate;

const MONTHS: &[(&str, u32)] = &[
    ("janvier", 1),
    ("fevrier", 2),
    ("février", 2),
    ("mars", 3),
    ("avril", 4),
    ("mai", 5),
    ("juin", 6),
    ("juillet", 7),
    ("aout", 8),
    ("août", 8),
    ("septembre", 9),
    ("octobre", 10),
    ("novembre", 11),
    ("decembre", 12),
    ("décembre", 12),
];

const WEEKDAYS: &[&str] = &["lundi", "mardi", "mercredi", "jeudi", "vendredi", "samedi", "dimanche"];

pub fn month_name(month: u32) -> &'static str {
    ["janvier", "février", "mars", "avril", "mai", "juin", "juillet", "août", "septembre", "octobre", "novembre", "décembre"]
        [(month as usize).saturating_sub(1) % 12]
}

/// Parses `[weekday] [le] <day|1er> <month> <year>` (e.g. `12 mai 1744`,
/// `Samedi 1er juin 1743`). Case-insensitive; a trailing period is ignored.
pub fn parse_french_date(text: &str) -> Option<NaiveDate> {
    let lowered = text.to_lowercase();
    let mut tokens: Vec<&str> = lowered
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.first().is_some_and(|t| WEEKDAYS.contains(t)) {
        tokens.remove(0);
    }
    if tokens.first() == Some(&"le") {
        tokens.remove(0);
    }
    let [day, month, year] = tokens.as_slice() else {
        return None;
    };
    let day: u32 = match *day {
        "1er" => 1,
        d => d.parse().ok()?,
    };
    let month = MONTHS.iter().find(|(name, _)| name == month)?.1;
    let year: i32 = year.trim_end_matches('.').parse().ok()?;
    NaiveDate::from_ymd_opt(year, month, day)
}

/// Renders a date the way [`parse_french_date`] reads it.
pub fn format_french_date(date: NaiveDate) -> String {
    use chrono::Datelike;
    let day = match date.day() {
        1 => "1er".to_string(),
        d => d.to_string(),
    };
    format!("{day} {} {}", month_name(date.month()), date.year())
}
