//! Region-graph query language.
//!
//! ```text
//! query := graph (';' graph)*
//! graph := '(' pred (',' pred)* ')'
//!        | 'Duration' '(' body ',' int ')'
//!        | pred
//! body  := '(' pred (',' pred)* ')' | pred
//! pred  := name '(' var (',' var)? ')'
//! var   := 'o' digits
//! ```
//!
//! Whitespace is ignored between tokens. The printer always emits the
//! canonical form: every graph parenthesised, `Duration(..., d)` only when
//! `d > 1`, graphs joined by `"; "`.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// Number of object arguments a predicate takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(into = "u8", try_from = "u8"))]
pub enum Arity {
    Unary,
    Binary,
}

impl Arity {
    pub fn count(self) -> usize {
        match self {
            Arity::Unary => 1,
            Arity::Binary => 2,
        }
    }

    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            1 => Some(Arity::Unary),
            2 => Some(Arity::Binary),
            _ => None,
        }
    }
}

impl From<Arity> for u8 {
    fn from(a: Arity) -> u8 {
        a.count() as u8
    }
}

impl TryFrom<u8> for Arity {
    type Error = &'static str;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Arity::from_count(v as usize).ok_or("arity must be 1 or 2")
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.count())
    }
}

/// Object variable `o<index>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Variable(pub u32);

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub name: String,
    pub args: Vec<Variable>,
}

impl Predicate {
    pub fn unary(name: &str, v: u32) -> Self {
        Self { name: name.to_string(), args: alloc::vec![Variable(v)] }
    }

    pub fn binary(name: &str, a: u32, b: u32) -> Self {
        Self { name: name.to_string(), args: alloc::vec![Variable(a), Variable(b)] }
    }

    pub fn arity(&self) -> Arity {
        Arity::from_count(self.args.len()).expect("predicate arity checked at construction")
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, v) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

/// One step of an event: predicates that must hold together on at least
/// `duration` consecutive frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegionGraph {
    pub predicates: Vec<Predicate>,
    pub duration: u32,
}

impl fmt::Display for RegionGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.duration > 1 {
            f.write_str("Duration(")?;
        }
        f.write_str("(")?;
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{p}")?;
        }
        f.write_str(")")?;
        if self.duration > 1 {
            write!(f, ", {})", self.duration)?;
        }
        Ok(())
    }
}

/// Temporally ordered sequence of region graphs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub graphs: Vec<RegionGraph>,
}

impl Query {
    /// Checks the structural invariants and returns the query unchanged.
    pub fn new(graphs: Vec<RegionGraph>) -> Result<Self, ParseError> {
        let q = Query { graphs };
        q.check()?;
        Ok(q)
    }

    /// Number of distinct variables (they are contiguous from `o0`).
    pub fn variable_count(&self) -> usize {
        self.variables().len()
    }

    pub fn variables(&self) -> BTreeSet<Variable> {
        self.predicates().flat_map(|p| p.args.iter().copied()).collect()
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.graphs.iter().flat_map(|g| g.predicates.iter())
    }

    fn check(&self) -> Result<(), ParseError> {
        if self.graphs.is_empty() {
            return Err(ParseError::new(0, ParseErrorKind::Empty));
        }
        for g in &self.graphs {
            if g.predicates.is_empty() {
                return Err(ParseError::new(0, ParseErrorKind::Empty));
            }
            if g.duration < 1 {
                return Err(ParseError::new(0, ParseErrorKind::DurationTooSmall));
            }
            for (i, p) in g.predicates.iter().enumerate() {
                if Arity::from_count(p.args.len()).is_none() {
                    return Err(ParseError::new(0, ParseErrorKind::BadArity(p.name.clone())));
                }
                if p.args.len() == 2 && p.args[0] == p.args[1] {
                    return Err(ParseError::new(0, ParseErrorKind::RepeatedVariable(p.name.clone())));
                }
                if g.predicates[..i].contains(p) {
                    return Err(ParseError::new(0, ParseErrorKind::DuplicatePredicate(p.to_string())));
                }
                if is_negation_word(&p.name) {
                    return Err(ParseError::new(0, ParseErrorKind::Negation));
                }
            }
        }
        let vars = self.variables();
        for (expected, v) in vars.iter().enumerate() {
            if v.0 as usize != expected {
                return Err(ParseError::new(0, ParseErrorKind::NonContiguousVariables));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.graphs.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    UnexpectedEnd,
    Expected(&'static str),
    Negation,
    DurationTooSmall,
    BadVariable,
    BadArity(String),
    RepeatedVariable(String),
    DuplicatePredicate(String),
    NonContiguousVariables,
    Empty,
}

/// Syntax or structural error; `position` is a byte offset into the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn new(position: usize, kind: ParseErrorKind) -> Self {
        Self { position, kind }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = self.position;
        match &self.kind {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character '{c}' at position {at}"),
            ParseErrorKind::UnexpectedEnd => write!(f, "unexpected end of input at position {at}"),
            ParseErrorKind::Expected(what) => write!(f, "expected {what} at position {at}"),
            ParseErrorKind::Negation => write!(f, "negation is not supported (position {at})"),
            ParseErrorKind::DurationTooSmall => write!(f, "duration must be >= 1 (position {at})"),
            ParseErrorKind::BadVariable => write!(f, "variables must be written o0, o1, ... (position {at})"),
            ParseErrorKind::BadArity(name) => write!(f, "predicate {name} must take one or two variables"),
            ParseErrorKind::RepeatedVariable(name) => {
                write!(f, "predicate {name} uses the same variable twice")
            }
            ParseErrorKind::DuplicatePredicate(p) => write!(f, "duplicate predicate {p} in one region graph"),
            ParseErrorKind::NonContiguousVariables => {
                f.write_str("variables must be numbered contiguously from o0")
            }
            ParseErrorKind::Empty => f.write_str("empty query or region graph"),
        }
    }
}

impl core::error::Error for ParseError {}

fn is_negation_word(word: &str) -> bool {
    word.eq_ignore_ascii_case("not") || word.eq_ignore_ascii_case("neg") || word.eq_ignore_ascii_case("negation")
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn err<T>(&self, kind: ParseErrorKind) -> Result<T, ParseError> {
        Err(ParseError::new(self.pos, kind))
    }

    fn expect(&mut self, want: char, what: &'static str) -> Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(_) => self.err(ParseErrorKind::Expected(what)),
            None => self.err(ParseErrorKind::UnexpectedEnd),
        }
    }

    fn ident(&mut self) -> Result<(usize, &'a str), ParseError> {
        let start = match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos,
            Some(_) => return self.err(ParseErrorKind::Expected("a predicate name")),
            None => return self.err(ParseErrorKind::UnexpectedEnd),
        };
        let rest = &self.src[start..];
        let len = rest
            .char_indices()
            .find(|&(_, c)| !(c.is_ascii_alphanumeric() || c == '_'))
            .map_or(rest.len(), |(i, _)| i);
        self.pos = start + len;
        let word = &self.src[start..start + len];
        if is_negation_word(word) {
            return Err(ParseError::new(start, ParseErrorKind::Negation));
        }
        Ok((start, word))
    }

    fn integer(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.src[start..].bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.err(ParseErrorKind::Expected("an integer"));
        }
        self.pos += digits;
        self.src[start..self.pos]
            .parse()
            .map_err(|_| ParseError::new(start, ParseErrorKind::Expected("an integer")))
    }

    fn variable(&mut self) -> Result<Variable, ParseError> {
        let (start, word) = self.ident()?;
        let idx = word
            .strip_prefix('o')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<u32>().ok());
        match idx {
            Some(i) => Ok(Variable(i)),
            None => Err(ParseError::new(start, ParseErrorKind::BadVariable)),
        }
    }

    fn predicate_after_name(&mut self, start: usize, name: &str) -> Result<Predicate, ParseError> {
        self.expect('(', "'('")?;
        let mut args = alloc::vec![self.variable()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            args.push(self.variable()?);
        }
        self.expect(')', "')'")?;
        if args.len() > 2 {
            return Err(ParseError::new(start, ParseErrorKind::BadArity(name.to_string())));
        }
        if args.len() == 2 && args[0] == args[1] {
            return Err(ParseError::new(start, ParseErrorKind::RepeatedVariable(name.to_string())));
        }
        Ok(Predicate { name: name.to_string(), args })
    }

    fn predicate(&mut self) -> Result<Predicate, ParseError> {
        let (start, name) = self.ident()?;
        if name == "Duration" {
            return Err(ParseError::new(start, ParseErrorKind::Expected("a predicate name")));
        }
        self.predicate_after_name(start, name)
    }

    /// `'(' pred (',' pred)* ')'`, opening parenthesis already peeked.
    fn predicate_list(&mut self) -> Result<Vec<Predicate>, ParseError> {
        self.expect('(', "'('")?;
        let mut preds = alloc::vec![self.predicate()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            preds.push(self.predicate()?);
        }
        self.expect(')', "')'")?;
        Ok(preds)
    }

    fn body(&mut self) -> Result<Vec<Predicate>, ParseError> {
        if self.peek() == Some('(') {
            self.predicate_list()
        } else {
            Ok(alloc::vec![self.predicate()?])
        }
    }

    fn graph(&mut self) -> Result<RegionGraph, ParseError> {
        let start = self.pos;
        let predicates = match self.peek() {
            Some('(') => {
                let preds = self.predicate_list()?;
                return self.graph_ok(start, RegionGraph { predicates: preds, duration: 1 });
            }
            Some(_) => {
                let (name_start, name) = self.ident()?;
                if name != "Duration" {
                    alloc::vec![self.predicate_after_name(name_start, name)?]
                } else {
                    self.expect('(', "'('")?;
                    let preds = self.body()?;
                    self.expect(',', "',' before the duration")?;
                    let d_pos = {
                        self.skip_ws();
                        self.pos
                    };
                    let d = self.integer()?;
                    self.expect(')', "')'")?;
                    if d < 1 {
                        return Err(ParseError::new(d_pos, ParseErrorKind::DurationTooSmall));
                    }
                    let duration = u32::try_from(d)
                        .map_err(|_| ParseError::new(d_pos, ParseErrorKind::Expected("a smaller duration")))?;
                    return self.graph_ok(start, RegionGraph { predicates: preds, duration });
                }
            }
            None => return self.err(ParseErrorKind::UnexpectedEnd),
        };
        self.graph_ok(start, RegionGraph { predicates, duration: 1 })
    }

    fn graph_ok(&self, start: usize, g: RegionGraph) -> Result<RegionGraph, ParseError> {
        for (i, p) in g.predicates.iter().enumerate() {
            if g.predicates[..i].contains(p) {
                return Err(ParseError::new(start, ParseErrorKind::DuplicatePredicate(p.to_string())));
            }
        }
        Ok(g)
    }
}

/// Parses query text.
pub fn parse(text: &str) -> Result<Query, ParseError> {
    if let Some((i, _)) = text.char_indices().find(|&(_, c)| matches!(c, '!' | '~' | '¬')) {
        return Err(ParseError::new(i, ParseErrorKind::Negation));
    }
    let mut p = Parser { src: text, pos: 0 };
    let mut graphs = alloc::vec![p.graph()?];
    loop {
        match p.peek() {
            None => break,
            Some(';') => {
                p.pos += 1;
                graphs.push(p.graph()?);
            }
            Some(c) => return p.err(ParseErrorKind::UnexpectedChar(c)),
        }
    }
    let q = Query { graphs };
    q.check().map_err(|e| ParseError::new(text.len(), e.kind))?;
    Ok(q)
}

/// Anything that knows which predicate names exist and with what arity.
pub trait PredicateCatalog {
    fn arity_of(&self, name: &str) -> Option<Arity>;
}

/// A predicate occurrence the catalog cannot resolve.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnresolvedPredicate {
    pub name: String,
    pub arity: Arity,
    /// Set when the name exists but with a different arity.
    pub registered_arity: Option<Arity>,
}

impl fmt::Display for UnresolvedPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.registered_arity {
            Some(reg) => write!(
                f,
                "predicate {} is used with {} argument(s) but takes {}",
                self.name, self.arity, reg
            ),
            None => write!(f, "predicate {} with {} argument(s) is not available", self.name, self.arity),
        }
    }
}

/// Lists predicates not resolvable by `catalog`, de-duplicated by
/// (name, arity) in order of first occurrence.
pub fn validate(query: &Query, catalog: &dyn PredicateCatalog) -> Vec<UnresolvedPredicate> {
    let mut out: Vec<UnresolvedPredicate> = Vec::new();
    for p in query.predicates() {
        let arity = p.arity();
        let registered = catalog.arity_of(&p.name);
        if registered == Some(arity) {
            continue;
        }
        if out.iter().any(|u| u.name == p.name && u.arity == arity) {
            continue;
        }
        out.push(UnresolvedPredicate { name: p.name.clone(), arity, registered_arity: registered });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::format;
    use proptest::prelude::*;

    const EXAMPLE: &str = "(car(o0), truck(o1), far(o0, o1)); Duration((near(o0, o1)), 240)";

    struct Cat(BTreeMap<&'static str, Arity>);
    impl PredicateCatalog for Cat {
        fn arity_of(&self, name: &str) -> Option<Arity> {
            self.0.get(name).copied()
        }
    }

    #[test]
    fn parses_car_truck_example() {
        let q = parse(EXAMPLE).unwrap();
        assert_eq!(q.graphs.len(), 2);
        assert_eq!(q.graphs[0].predicates.len(), 3);
        assert_eq!(q.graphs[0].duration, 1);
        assert_eq!(q.graphs[1].duration, 240);
        assert_eq!(q.graphs[1].predicates, [Predicate::binary("near", 0, 1)]);
        assert_eq!(parse(&q.to_string()).unwrap(), q);
        assert_eq!(q.to_string(), EXAMPLE);
    }

    #[test]
    fn minimal_query() {
        let q = parse("red(o0)").unwrap();
        assert_eq!(q.graphs.len(), 1);
        assert_eq!(q.graphs[0].predicates, [Predicate::unary("red", 0)]);
        assert_eq!(q.graphs[0].duration, 1);
        assert_eq!(q.to_string(), "(red(o0))");
    }

    #[test]
    fn lenient_forms() {
        let a = parse("  Duration( a(o0) ,3 );b(o0,o1)").unwrap();
        assert_eq!(a.to_string(), "Duration((a(o0)), 3); (b(o0, o1))");
        let b = parse("Duration((a(o0)), 1)").unwrap();
        assert_eq!(b.to_string(), "(a(o0))");
    }

    #[test]
    fn duration_zero_rejected() {
        let e = parse("Duration((a(o0)), 0)").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DurationTooSmall);
        assert_eq!(e.position, 18);
    }

    #[test]
    fn negation_rejected() {
        for s in ["!red(o0)", "(red(o0), ~blue(o0))", "not(red(o0))", "(NOT red(o0))", "¬red(o0)"] {
            assert_eq!(parse(s).unwrap_err().kind, ParseErrorKind::Negation, "{s}");
        }
    }

    #[test]
    fn structural_errors() {
        assert_eq!(parse("near(o0, o0)").unwrap_err().kind, ParseErrorKind::RepeatedVariable("near".into()));
        assert_eq!(parse("red(o1)").unwrap_err().kind, ParseErrorKind::NonContiguousVariables);
        assert!(matches!(parse("(a(o0), a(o0))").unwrap_err().kind, ParseErrorKind::DuplicatePredicate(_)));
        assert!(matches!(parse("a(o0, o1, o2)").unwrap_err().kind, ParseErrorKind::BadArity(_)));
        assert!(matches!(parse("a(x)").unwrap_err().kind, ParseErrorKind::BadVariable));
        assert!(matches!(parse("").unwrap_err().kind, ParseErrorKind::UnexpectedEnd));
        assert!(matches!(parse("a(o0) b(o0)").unwrap_err().kind, ParseErrorKind::UnexpectedChar('b')));
        let e = parse("(a(o0), b(o0)").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnexpectedEnd);
    }

    #[test]
    fn validate_reports_missing_and_mismatched() {
        let cat = Cat([("car", Arity::Unary), ("truck", Arity::Unary), ("far", Arity::Binary), ("red", Arity::Unary)]
            .into_iter()
            .collect());
        let q = parse(EXAMPLE).unwrap();
        let missing = validate(&q, &cat);
        assert_eq!(missing, [UnresolvedPredicate { name: "near".into(), arity: Arity::Binary, registered_arity: None }]);

        let q = parse("(red(o0, o1)); (red(o0, o1), near(o1, o0))").unwrap();
        let missing = validate(&q, &cat);
        assert_eq!(missing.len(), 2);
        assert_eq!(missing[0].registered_arity, Some(Arity::Unary));

        let all = Cat([("near", Arity::Binary), ("far", Arity::Binary), ("car", Arity::Unary), ("truck", Arity::Unary)]
            .into_iter()
            .collect());
        assert!(validate(&parse(EXAMPLE).unwrap(), &all).is_empty());
    }

    pub(crate) fn arb_query() -> impl Strategy<Value = Query> {
        let names = prop::sample::select(alloc::vec!["a", "red", "near", "left_of", "x_1", "Car"]);
        let pred = (names, 0u32..3, prop::option::of(0u32..3)).prop_map(|(n, a, b)| match b {
            Some(b) if b != a => Predicate::binary(n, a, b),
            _ => Predicate::unary(n, a),
        });
        let graph = (prop::collection::vec(pred, 1..4), prop_oneof![Just(1u32), 2u32..500]).prop_map(|(mut ps, d)| {
            let mut seen = Vec::new();
            ps.retain(|p| {
                let fresh = !seen.contains(p);
                seen.push(p.clone());
                fresh
            });
            RegionGraph { predicates: ps, duration: d }
        });
        prop::collection::vec(graph, 1..4).prop_map(renumber)
    }

    fn renumber(graphs: Vec<RegionGraph>) -> Query {
        let mut map = BTreeMap::new();
        let mut graphs = graphs;
        for g in &graphs {
            for p in &g.predicates {
                for v in &p.args {
                    let next = map.len() as u32;
                    map.entry(*v).or_insert(next);
                }
            }
        }
        for g in &mut graphs {
            for p in &mut g.predicates {
                for v in &mut p.args {
                    *v = Variable(map[v]);
                }
            }
        }
        Query { graphs }
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(q in arb_query()) {
            q.check().unwrap();
            let text = format!("{q}");
            prop_assert_eq!(parse(&text).unwrap(), q);
        }

        #[test]
        fn validate_is_monotone(q in arb_query(), extra in prop::collection::vec(prop::sample::select(alloc::vec!["a", "red", "near", "x_1"]), 0..4)) {
            let small = Cat([("Car", Arity::Unary)].into_iter().collect());
            let mut big = small.0.clone();
            for n in extra {
                big.insert(n, if n == "near" { Arity::Binary } else { Arity::Unary });
            }
            let big = Cat(big);
            prop_assert!(validate(&q, &big).len() <= validate(&q, &small).len());
        }
    }
}
