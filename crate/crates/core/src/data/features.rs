/// Number of word-shape classes produced by [`shape_class`].
pub const NUM_SHAPE_CLASSES: usize = 5;

/// Replaces every ASCII digit with `'0'`.
pub fn normalize_digits(word: &str) -> String {
    word.chars().map(|c| if c.is_ascii_digit() { '0' } else { c }).collect()
}

/// Capitalization class of a surface form:
///
/// * 0: every letter is uppercase
/// * 1: no uppercase letters
/// * 2: first character uppercase (and not class 0)
/// * 3: some uppercase letter, but neither 0 nor 2
/// * 4: no alphabetic characters at all
pub fn shape_class(surface: &str) -> usize {
    let mut letters = surface.chars().filter(|c| c.is_alphabetic()).peekable();
    if letters.peek().is_none() {
        return 4;
    }
    let mut any_upper = false;
    let mut all_upper = true;
    for c in letters {
        if c.is_uppercase() {
            any_upper = true;
        } else {
            all_upper = false;
        }
    }
    if all_upper {
        0
    } else if !any_upper {
        1
    } else if surface.chars().next().is_some_and(char::is_uppercase) {
        2
    } else {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_classes() {
        assert_eq!(shape_class("NATO"), 0);
        assert_eq!(shape_class("paris"), 1);
        assert_eq!(shape_class("London"), 2);
        assert_eq!(shape_class("iPhone"), 3);
        assert_eq!(shape_class("2008"), 4);
        assert_eq!(shape_class(""), 4);
        assert_eq!(shape_class("U.S."), 0);
        assert_eq!(shape_class("--"), 4);
        assert_eq!(shape_class("東京"), 1);
        assert_eq!(shape_class("Élysée"), 2);
    }

    #[test]
    fn digits_normalized() {
        assert_eq!(normalize_digits("1996-08-30"), "0000-00-00");
        assert_eq!(normalize_digits("B52s"), "B00s");
        assert_eq!(normalize_digits("no digits"), "no digits");
    }
}
