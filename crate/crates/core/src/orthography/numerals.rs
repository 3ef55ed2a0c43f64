//! Arabic-to-Chinese numeral rendering.
//!
//! Positional readings cover 0..=99,999,999 with traditional characters
//! (萬-grouping); digit-wise rendering maps each digit independently and is
//! used for leading-zero runs and runs longer than eight digits.

const DIGITS: [char; 10] = ['零', '一', '二', '三', '四', '五', '六', '七', '八', '九'];
const DIGITWISE: [char; 10] = ['〇', '一', '二', '三', '四', '五', '六', '七', '八', '九'];

/// Largest value the positional reading covers.
pub const POSITIONAL_MAX: u64 = 99_999_999;

/// Positional reading of `n`, e.g. 123 -> 一百二十三.
///
/// Panics in debug builds if `n` exceeds [`POSITIONAL_MAX`]; callers route
/// longer runs through [`digitwise`].
pub fn chinese_numeral(n: u64) -> String {
    debug_assert!(n <= POSITIONAL_MAX);
    if n == 0 {
        return DIGITS[0].to_string();
    }
    let mut out = String::new();
    let (high, low) = (n / 10_000, n % 10_000);
    if high > 0 {
        out.push_str(&render_group(high as usize));
        out.push('萬');
        if low > 0 && low < 1000 {
            out.push(DIGITS[0]); // gap zero between 萬 and a short tail
        }
    }
    if low > 0 {
        out.push_str(&render_group(low as usize));
    }
    // 10..=19 and 100,000..=199,999 read without the leading 一.
    if let Some(stripped) = out.strip_prefix("一十") {
        out = format!("十{stripped}");
    }
    out
}

/// One group of up to four digits (1..=9999), without 萬-scaling.
fn render_group(x: usize) -> String {
    debug_assert!(x >= 1 && x <= 9999);
    let units = ['\0', '十', '百', '千'];
    let mut out = String::new();
    let mut pending_zero = false;
    let mut started = false;
    for pos in (0..4).rev() {
        let d = x / 10usize.pow(pos as u32) % 10;
        if d == 0 {
            if started {
                pending_zero = true;
            }
            continue;
        }
        if pending_zero {
            out.push(DIGITS[0]);
            pending_zero = false;
        }
        out.push(DIGITS[d]);
        if pos > 0 {
            out.push(units[pos]);
        }
        started = true;
    }
    out
}

/// Digit-wise reading, e.g. "0912" -> 〇九一二.
pub fn digitwise(run: &str) -> String {
    run.chars()
        .map(|c| DIGITWISE[c.to_digit(10).expect("digit run") as usize])
        .collect()
}
