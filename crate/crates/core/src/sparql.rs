//! Parser for a small SPARQL subset:
//!
//! ```text
//! query   := prefix* "SELECT" "DISTINCT"? var "WHERE" "{" (pattern ".")+ "}"
//! prefix  := "PREFIX" name? ":" "<" iri ">"
//! pattern := term term term
//! term    := var | iri
//! var     := "?" name
//! iri     := (prefix ":")? name | "<" chars ">"
//! ```
//!
//! `FILTER (...)`, `OPTIONAL`/`UNION`/`MINUS` groups, and solution modifiers
//! after the closing brace are not parsed. They are skipped and reported in
//! [`SparqlAst::unsupported_features`] instead: for a `FILTER`, each
//! comparison or logical operator it contains (`<=`, `||`, ...), or `FILTER`
//! itself when it has none. `#` starts a comment at a token boundary.

use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    /// `prefix` is `None` for the bracketed form and for bare names.
    Iri {
        prefix: Option<String>,
        name: String,
    },
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => write!(f, "?{v}"),
            Term::Iri {
                prefix: Some(p),
                name,
            } => write!(f, "{p}:{name}"),
            Term::Iri { prefix: None, name } => write!(f, "<{name}>"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub subject: Term,
    pub predicate: Term,
    pub object: Term,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparqlAst {
    pub prefixes: Vec<(String, String)>,
    pub distinct: bool,
    pub select_var: String,
    pub patterns: Vec<Pattern>,
    pub unsupported_features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("SPARQL syntax error at byte {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Word(String),
    Prefixed(String, String),
    Var(String),
    Iri(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Dot,
    /// Anything else; only legal inside skipped constructs.
    Other(String),
}

const OPERATORS: [&str; 8] = ["<=", ">=", "!=", "||", "&&", "<", ">", "="];
const SKIPPED_GROUPS: [&str; 7] = [
    "OPTIONAL", "UNION", "MINUS", "VALUES", "BIND", "GRAPH", "SERVICE",
];

fn is_name_char(c: char) -> bool {
    !c.is_whitespace() && !"{}()<>;,\"'#?$".contains(c)
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn err<T>(&self, pos: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos,
            message: message.into(),
        })
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek_char() {
                Some(c) if c.is_whitespace() => self.pos += c.len_utf8(),
                Some('#') => {
                    let rest = &self.src[self.pos..];
                    self.pos += rest.find('\n').unwrap_or(rest.len());
                }
                _ => return,
            }
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek_char() {
            if !f(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    /// `<...>` with `\>` and `\\` escapes. Fails when the content starts
    /// with whitespace or the bracket does not close on the same line; the
    /// caller then treats `<` as an operator.
    fn bracketed(&mut self) -> Option<String> {
        let mut out = String::new();
        let body = &self.src[self.pos + 1..];
        if body.starts_with(char::is_whitespace) {
            return None;
        }
        let mut chars = body.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '>' => {
                    self.pos += 1 + i + 1;
                    return Some(out);
                }
                '\\' => match chars.next() {
                    Some((_, e)) => out.push(e),
                    None => return None,
                },
                '\n' => return None,
                c => out.push(c),
            }
        }
        None
    }

    /// Returns the token and its starting byte offset.
    fn next(&mut self) -> Result<Option<(Tok, usize)>, ParseError> {
        self.skip_trivia();
        let start = self.pos;
        let Some(c) = self.peek_char() else {
            return Ok(None);
        };
        let single = |t: Tok, lx: &mut Self| {
            lx.pos += 1;
            Ok(Some((t, start)))
        };
        match c {
            '{' => return single(Tok::LBrace, self),
            '}' => return single(Tok::RBrace, self),
            '(' => return single(Tok::LParen, self),
            ')' => return single(Tok::RParen, self),
            '.' => return single(Tok::Dot, self),
            '?' | '$' => {
                self.pos += 1;
                let name = self.take_while(|c| c.is_alphanumeric() || c == '_');
                if name.is_empty() {
                    return self.err(start, "empty variable name");
                }
                return Ok(Some((Tok::Var(name.to_owned()), start)));
            }
            '<' => {
                if self.src[self.pos..].starts_with("<=") {
                    self.pos += 2;
                    return Ok(Some((Tok::Other("<=".into()), start)));
                }
                if let Some(iri) = self.bracketed() {
                    return Ok(Some((Tok::Iri(iri), start)));
                }
                return single(Tok::Other("<".into()), self);
            }
            '"' | '\'' => {
                let rest = &self.src[self.pos + 1..];
                let Some(end) = rest.find(c) else {
                    return self.err(start, "unterminated string");
                };
                self.pos += end + 2;
                return Ok(Some((Tok::Other("string".into()), start)));
            }
            _ => {}
        }
        for op in OPERATORS {
            if self.src[self.pos..].starts_with(op) {
                self.pos += op.len();
                return Ok(Some((Tok::Other(op.to_owned()), start)));
            }
        }
        if !is_name_char(c) && c != ':' {
            self.pos += c.len_utf8();
            return Ok(Some((Tok::Other(c.to_string()), start)));
        }
        let mut word = self.take_while(|c| is_name_char(c) || c == ':');
        // a trailing '.' terminates the pattern rather than extending the name
        if word.len() > 1 && word.ends_with('.') {
            word = &word[..word.len() - 1];
            self.pos -= 1;
        }
        Ok(Some((
            match word.split_once(':') {
                Some((p, n)) => Tok::Prefixed(p.to_owned(), n.to_owned()),
                None => Tok::Word(word.to_owned()),
            },
            start,
        )))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
    end: usize,
    unsupported: Vec<String>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |&(_, p)| p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(t, _)| t.clone());
        self.at += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.keyword(kw) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {kw}"))
        }
    }

    fn note(&mut self, feature: &str) {
        if !self.unsupported.iter().any(|f| f == feature) {
            self.unsupported.push(feature.to_owned());
        }
    }

    /// Skips a balanced `(...)` or `{...}` group, recording operators.
    fn skip_group(&mut self) -> Result<bool, ParseError> {
        let mut depth = 0usize;
        let mut saw_operator = false;
        loop {
            let tok = match self.bump() {
                Some(t) => t,
                None => return self.err("unbalanced group"),
            };
            match tok {
                Tok::LParen | Tok::LBrace => depth += 1,
                Tok::RParen | Tok::RBrace => {
                    depth = depth.saturating_sub(1);
                    if depth == 0 {
                        return Ok(saw_operator);
                    }
                }
                Tok::Other(op) if OPERATORS.contains(&op.as_str()) => {
                    saw_operator = true;
                    self.note(&op);
                }
                Tok::Word(w) if w.eq_ignore_ascii_case("OR") || w.eq_ignore_ascii_case("AND") => {
                    saw_operator = true;
                    self.note(&w.to_ascii_uppercase());
                }
                _ => {}
            }
            if depth == 0 {
                return self.err("expected a parenthesized or braced group");
            }
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.bump() {
            Some(Tok::Var(v)) => Ok(Term::Var(v)),
            Some(Tok::Iri(i)) => Ok(Term::Iri {
                prefix: None,
                name: i,
            }),
            Some(Tok::Prefixed(p, n)) if !n.is_empty() => Ok(Term::Iri {
                prefix: Some(p),
                name: n,
            }),
            Some(Tok::Word(w)) => Ok(Term::Iri {
                prefix: None,
                name: w,
            }),
            _ => {
                self.at -= 1;
                self.err("expected a variable or IRI")
            }
        }
    }

    fn query(&mut self) -> Result<SparqlAst, ParseError> {
        let mut prefixes = Vec::new();
        while self.keyword("PREFIX") {
            self.at += 1;
            let name = match self.bump() {
                Some(Tok::Prefixed(p, n)) if n.is_empty() => p,
                _ => {
                    self.at -= 1;
                    return self.err("expected `name:` after PREFIX");
                }
            };
            match self.bump() {
                Some(Tok::Iri(iri)) => prefixes.push((name, iri)),
                _ => {
                    self.at -= 1;
                    return self.err("expected <iri> in PREFIX");
                }
            }
        }
        self.expect_keyword("SELECT")?;
        let distinct = self.keyword("DISTINCT");
        if distinct {
            self.at += 1;
        }
        let select_var = match self.bump() {
            Some(Tok::Var(v)) => v,
            _ => {
                self.at -= 1;
                return self.err("expected a selected variable");
            }
        };
        self.expect_keyword("WHERE")?;
        if self.bump() != Some(Tok::LBrace) {
            self.at -= 1;
            return self.err("expected `{`");
        }
        let mut patterns = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::RBrace) => break,
                None => return self.err("unterminated WHERE block"),
                Some(Tok::Dot) => {
                    self.at += 1;
                    continue;
                }
                _ => {}
            }
            if self.keyword("FILTER") {
                self.at += 1;
                if !self.skip_group()? {
                    self.note("FILTER");
                }
                continue;
            }
            if let Some(kw) = SKIPPED_GROUPS.iter().find(|kw| self.keyword(kw)) {
                self.note(kw);
                self.at += 1;
                self.skip_group()?;
                continue;
            }
            if matches!(self.peek(), Some(Tok::LBrace)) {
                // `{ ... } UNION { ... }`
                self.note("group");
                self.skip_group()?;
                continue;
            }
            let subject = self.term()?;
            let predicate = self.term()?;
            let object = self.term()?;
            if self.bump() != Some(Tok::Dot) {
                self.at -= 1;
                return self.err("expected `.` after triple pattern");
            }
            patterns.push(Pattern {
                subject,
                predicate,
                object,
            });
        }
        let close = self.pos();
        self.at += 1;
        if patterns.is_empty() {
            return Err(ParseError {
                pos: close,
                message: "WHERE block has no triple patterns".into(),
            });
        }
        while let Some(tok) = self.bump() {
            match tok {
                Tok::Word(w) if w.chars().all(char::is_alphabetic) => {
                    self.note(&w.to_ascii_uppercase())
                }
                Tok::Other(o) if OPERATORS.contains(&o.as_str()) => self.note(&o),
                _ => {}
            }
        }
        let used = patterns.iter().any(|p| {
            [&p.subject, &p.predicate, &p.object]
                .iter()
                .any(|t| matches!(t, Term::Var(v) if *v == select_var))
        });
        if !used && self.unsupported.is_empty() {
            return Err(ParseError {
                pos: 0,
                message: format!("selected variable ?{select_var} does not occur in any pattern"),
            });
        }
        Ok(SparqlAst {
            prefixes,
            distinct,
            select_var,
            patterns,
            unsupported_features: std::mem::take(&mut self.unsupported),
        })
    }
}

pub fn parse_sparql(text: &str) -> Result<SparqlAst, ParseError> {
    let mut lexer = Lexer { src: text, pos: 0 };
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    Parser {
        toks,
        at: 0,
        end: text.len(),
        unsupported: Vec::new(),
    }
    .query()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iri(name: &str) -> Term {
        Term::Iri {
            prefix: Some(String::new()),
            name: name.into(),
        }
    }

    #[test]
    fn two_patterns() {
        let ast = parse_sparql("SELECT DISTINCT ?x WHERE { :E :r ?y . ?y :r2 ?x . }").unwrap();
        assert_eq!(ast.select_var, "x");
        assert!(ast.distinct);
        assert_eq!(ast.patterns.len(), 2);
        assert_eq!(ast.patterns[0].subject, iri("E"));
        assert_eq!(ast.patterns[1].object, Term::Var("x".into()));
        assert!(ast.unsupported_features.is_empty());
    }

    #[test]
    fn filter_comparison_is_recorded() {
        let ast = parse_sparql(
            "SELECT DISTINCT ?x WHERE { :E :r ?x . ?x :year ?n . FILTER(?n <= 2000) }",
        )
        .unwrap();
        assert_eq!(ast.unsupported_features, ["<="]);
        assert_eq!(ast.patterns.len(), 2);
    }

    #[test]
    fn logical_or_and_plain_filter() {
        let ast =
            parse_sparql("SELECT ?x WHERE { :E :r ?x . FILTER(?x = :A || ?x = :B) }").unwrap();
        assert_eq!(ast.unsupported_features, ["=", "||"]);
        let ast = parse_sparql("SELECT ?x WHERE { :E :r ?x . FILTER(isIRI(?x)) }").unwrap();
        assert_eq!(ast.unsupported_features, ["FILTER"]);
        let ast = parse_sparql("SELECT ?x WHERE { :E :r ?x . } ORDER BY ?x LIMIT 1").unwrap();
        assert_eq!(ast.unsupported_features, ["ORDER", "BY", "LIMIT"]);
    }

    #[test]
    fn empty_where_is_an_error() {
        let err = parse_sparql("SELECT DISTINCT ?x WHERE { }").unwrap_err();
        assert_eq!(err.pos, 27);
        assert!(parse_sparql("SELECT DISTINCT ?x WHERE {}").is_err());
    }

    #[test]
    fn prefixes_dots_and_comments() {
        let text = "PREFIX ns: <http://rdf.freebase.com/ns/>\n\
                    # a comment\n\
                    SELECT DISTINCT ?x WHERE {\n  ns:m.0abc ns:film.actor.film ?x.\n}";
        let ast = parse_sparql(text).unwrap();
        assert_eq!(
            ast.prefixes,
            [("ns".to_owned(), "http://rdf.freebase.com/ns/".to_owned())]
        );
        assert_eq!(
            ast.patterns[0].predicate,
            Term::Iri {
                prefix: Some("ns".into()),
                name: "film.actor.film".into()
            }
        );
    }

    #[test]
    fn bracketed_iris() {
        let ast =
            parse_sparql(r"SELECT ?x WHERE { <Natalie Portman> :r ?x . ?x :s <a\>b> . }").unwrap();
        assert_eq!(
            ast.patterns[0].subject,
            Term::Iri {
                prefix: None,
                name: "Natalie Portman".into()
            }
        );
        assert_eq!(
            ast.patterns[1].object,
            Term::Iri {
                prefix: None,
                name: "a>b".into()
            }
        );
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_sparql("SELECT ?x WHERE { :E :r ?x }").unwrap_err();
        assert_eq!(err.pos, 27);
        assert!(parse_sparql("SELECT ?x { :E :r ?x . }").is_err());
        assert!(parse_sparql("SELECT ?x WHERE { :E :r \"lit\" . }").is_err());
        assert!(parse_sparql("SELECT ?z WHERE { :E :r ?x . }").is_err());
        assert!(parse_sparql("SELECT ?x WHERE { :E :r ?x . ").is_err());
    }
}
