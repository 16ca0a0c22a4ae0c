//! Surface tokenization shared by questions and serialized query graphs.

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Splits a KG symbol into fragments on whitespace, `.`, `_` and `-`.
/// Case is preserved; empty fragments are dropped.
pub fn split_symbol(symbol: &str) -> impl Iterator<Item = &str> {
    symbol
        .split(|c: char| c.is_whitespace() || matches!(c, '.' | '_' | '-'))
        .filter(|s| !s.is_empty())
}

/// Splits each unit with [`split_symbol`] and wraps the result in the
/// boundary tokens.
pub fn tokenize_units<'a, I>(units: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = vec![CLS.to_owned()];
    for unit in units {
        out.extend(split_symbol(unit).map(str::to_owned));
    }
    out.push(SEP.to_owned());
    out
}

/// Question text split on any non-alphanumeric character, wrapped in the
/// boundary tokens.
pub fn tokenize_question(text: &str) -> Vec<String> {
    let mut out = vec![CLS.to_owned()];
    out.extend(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(str::to_owned),
    );
    out.push(SEP.to_owned());
    out
}
