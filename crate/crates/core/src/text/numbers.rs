//! Spelling of digit runs.
//!
//! Integers 0–9999 are read as cardinals without hyphens or "AND"
//! ("21" → "TWENTY ONE"). Longer runs, and runs with a leading zero, are
//! spelled digit by digit.

const ONES: [&str; 20] = [
    "ZERO",
    "ONE",
    "TWO",
    "THREE",
    "FOUR",
    "FIVE",
    "SIX",
    "SEVEN",
    "EIGHT",
    "NINE",
    "TEN",
    "ELEVEN",
    "TWELVE",
    "THIRTEEN",
    "FOURTEEN",
    "FIFTEEN",
    "SIXTEEN",
    "SEVENTEEN",
    "EIGHTEEN",
    "NINETEEN",
];

const TENS: [&str; 10] = [
    "", "", "TWENTY", "THIRTY", "FORTY", "FIFTY", "SIXTY", "SEVENTY", "EIGHTY", "NINETY",
];

fn below_hundred(n: u32, out: &mut Vec<&'static str>) {
    if n < 20 {
        out.push(ONES[n as usize]);
    } else {
        out.push(TENS[(n / 10) as usize]);
        if n % 10 != 0 {
            out.push(ONES[(n % 10) as usize]);
        }
    }
}

fn below_thousand(n: u32, out: &mut Vec<&'static str>) {
    if n >= 100 {
        out.push(ONES[(n / 100) as usize]);
        out.push("HUNDRED");
        if n % 100 != 0 {
            below_hundred(n % 100, out);
        }
    } else {
        below_hundred(n, out);
    }
}

/// Cardinal words for `n ≤ 9999`.
pub fn cardinal(n: u32) -> String {
    assert!(n <= 9999);
    let mut words = Vec::new();
    if n >= 1000 {
        words.push(ONES[(n / 1000) as usize]);
        words.push("THOUSAND");
        if n % 1000 != 0 {
            below_thousand(n % 1000, &mut words);
        }
    } else {
        below_thousand(n, &mut words);
    }
    words.join(" ")
}

/// Words for a run of ASCII digits.
pub fn spell_digits(run: &str) -> String {
    debug_assert!(!run.is_empty() && run.bytes().all(|b| b.is_ascii_digit()));
    let leading_zero = run.len() > 1 && run.starts_with('0');
    if run.len() <= 4 && !leading_zero {
        return cardinal(run.parse().expect("ascii digits"));
    }
    run.bytes()
        .map(|b| ONES[(b - b'0') as usize])
        .collect::<Vec<_>>()
        .join(" ")
}
