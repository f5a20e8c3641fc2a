//! Text form of individuals: one s-expression per tree, state equations
//! first and the readout last, e.g.
//!
//! ```text
//! (mul -1.15 y1)
//! (sub (mul -6.14 z2) (mul 2.07 y1))
//! (add (mul 2 z1) (mul 6 z2))
//! ```
//!
//! Variables are 1-based in the text and 0-based in [`ExprNode`]. Constants
//! print in shortest round-trip form, so parse(serialize(x)) reproduces x
//! exactly.

use super::Individual;
use crate::dgp::expr::{ExprNode, ExprTree};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

fn write_node(node: &ExprNode, out: &mut String) {
    match node {
        ExprNode::Add(a, b) | ExprNode::Sub(a, b) | ExprNode::Mul(a, b) => {
            let op = match node {
                ExprNode::Add(..) => "add",
                ExprNode::Sub(..) => "sub",
                _ => "mul",
            };
            out.push('(');
            out.push_str(op);
            out.push(' ');
            write_node(a, out);
            out.push(' ');
            write_node(b, out);
            out.push(')');
        }
        ExprNode::VarZ(i) => {
            let _ = write!(out, "z{}", i + 1);
        }
        ExprNode::VarY(j) => {
            let _ = write!(out, "y{}", j + 1);
        }
        ExprNode::Const(c) => {
            let _ = write!(out, "{c}");
        }
    }
}

pub fn serialize_tree(tree: &ExprTree) -> String {
    let mut out = String::new();
    write_node(tree.root(), &mut out);
    out
}

/// One line per tree: the state equations in order, then the readout.
pub fn serialize_individual(ind: &Individual) -> String {
    let mut out = String::new();
    for tree in &ind.state_trees {
        out.push_str(&serialize_tree(tree));
        out.push('\n');
    }
    out.push_str(&serialize_tree(&ind.readout_tree));
    out.push('\n');
    out
}

#[derive(Debug, Clone, Copy)]
enum Token<'a> {
    Open(usize),
    Close(usize),
    Atom(&'a str, usize),
}

impl Token<'_> {
    fn position(&self) -> usize {
        match self {
            Token::Open(p) | Token::Close(p) => *p,
            Token::Atom(_, p) => *p,
        }
    }
}

fn tokenize(line: &str, base: usize) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                tokens.push(Token::Open(base + i));
                i += 1;
            }
            b')' => {
                tokens.push(Token::Close(base + i));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                tokens.push(Token::Atom(&line[start..i], base + start));
            }
        }
    }
    tokens
}

struct TreeParser<'a> {
    tokens: Vec<Token<'a>>,
    cursor: usize,
    end_position: usize,
    /// Number of agent state variables available as z leaves.
    dim_z: usize,
    /// Whether observation leaves are allowed in this tree.
    allow_y: bool,
}

impl<'a> TreeParser<'a> {
    fn err<T>(&self, position: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { position, message: message.into() })
    }

    fn peek(&self) -> Option<Token<'a>> {
        self.tokens.get(self.cursor).copied()
    }

    fn next(&mut self) -> Option<Token<'a>> {
        let t = self.peek();
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn parse_var(&self, text: &str, position: usize) -> Result<Option<ExprNode>, ParseError> {
        let (prefix, rest) = match text.split_at_checked(1) {
            Some(parts) => parts,
            None => return Ok(None),
        };
        if (prefix != "z" && prefix != "y") || rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit())
        {
            return Ok(None);
        }
        let index: usize = match rest.parse() {
            Ok(i) => i,
            Err(_) => return self.err(position, format!("variable index out of range in `{text}`")),
        };
        if index == 0 {
            return self.err(position, format!("variable indices are 1-based, got `{text}`"));
        }
        if prefix == "z" {
            if index > self.dim_z {
                return self.err(
                    position,
                    format!("`{text}` exceeds the {} agent state variables", self.dim_z),
                );
            }
            Ok(Some(ExprNode::VarZ(index - 1)))
        } else {
            if !self.allow_y {
                return self.err(position, "observation variables are not allowed in the readout");
            }
            Ok(Some(ExprNode::VarY(index - 1)))
        }
    }

    fn parse_expr(&mut self) -> Result<ExprNode, ParseError> {
        let token = match self.next() {
            Some(t) => t,
            None => return self.err(self.end_position, "expected expression, found end of line"),
        };
        match token {
            Token::Close(p) => self.err(p, "expected expression, found `)`"),
            Token::Atom(text, p) => {
                if let Some(var) = self.parse_var(text, p)? {
                    return Ok(var);
                }
                match text.parse::<f64>() {
                    Ok(v) => Ok(ExprNode::Const(v)),
                    Err(_) => self.err(p, format!("unknown token `{text}`")),
                }
            }
            Token::Open(p) => {
                let op = match self.next() {
                    Some(Token::Atom(text, _)) => text,
                    Some(t) => return self.err(t.position(), "expected operator after `(`"),
                    None => return self.err(p, "unterminated expression"),
                };
                let build: fn(Box<ExprNode>, Box<ExprNode>) -> ExprNode = match op {
                    "add" => ExprNode::Add,
                    "sub" => ExprNode::Sub,
                    "mul" => ExprNode::Mul,
                    other => {
                        return self.err(
                            self.tokens[self.cursor - 1].position(),
                            format!("unknown operator `{other}` (expected add, sub, or mul)"),
                        )
                    }
                };
                let left = self.parse_expr()?;
                let right = match self.peek() {
                    Some(Token::Close(p)) => {
                        return self.err(p, format!("operator `{op}` takes two operands, found one"))
                    }
                    _ => self.parse_expr()?,
                };
                match self.next() {
                    Some(Token::Close(_)) => {}
                    Some(t) => return self.err(t.position(), "expected `)`"),
                    None => return self.err(p, "unterminated expression"),
                }
                Ok(build(Box::new(left), Box::new(right)))
            }
        }
    }

    fn parse_line(mut self) -> Result<ExprNode, ParseError> {
        let node = self.parse_expr()?;
        if let Some(t) = self.peek() {
            return self.err(t.position(), "unexpected trailing tokens");
        }
        Ok(node)
    }
}

/// Parses one tree per non-empty line; the last line is the readout and the
/// rest are the state equations, which fixes how many z variables exist.
pub fn parse_individual(text: &str) -> Result<Individual, ParseError> {
    let mut lines = Vec::new();
    let mut offset = 0;
    for line in text.split('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let base = offset + (line.len() - line.trim_start().len());
            lines.push((trimmed, base));
        }
        offset += line.len() + 1;
    }
    if lines.len() < 2 {
        return Err(ParseError {
            position: 0,
            message: format!(
                "expected at least one state equation and a readout, found {} line(s)",
                lines.len()
            ),
        });
    }
    let dim_z = lines.len() - 1;
    let mut trees = Vec::with_capacity(lines.len());
    for (i, (line, base)) in lines.iter().enumerate() {
        let allow_y = i < dim_z;
        let parser = TreeParser {
            tokens: tokenize(line, *base),
            cursor: 0,
            end_position: base + line.len(),
            dim_z,
            allow_y,
        };
        trees.push(ExprTree::new(parser.parse_line()?));
    }
    let readout_tree = trees.pop().expect("at least two lines");
    Ok(Individual { state_trees: trees, readout_tree, fitness: None, id: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{random_individual, GpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_the_three_tree_example() {
        let text = "(mul -1.15 y1)\n(sub (mul -6.14 z2) (mul 2.07 y1))\n(add (mul 2 z1) (mul 6 z2))\n";
        let ind = parse_individual(text).unwrap();
        assert_eq!(ind.state_trees.len(), 2);
        assert_eq!(
            ind.readout_tree.root(),
            &ExprNode::Add(
                Box::new(ExprNode::Mul(Box::new(ExprNode::Const(2.0)), Box::new(ExprNode::VarZ(0)))),
                Box::new(ExprNode::Mul(Box::new(ExprNode::Const(6.0)), Box::new(ExprNode::VarZ(1)))),
            )
        );
        assert_eq!(serialize_individual(&ind), text);
    }

    #[test]
    fn arity_violation_reports_position() {
        let err = parse_individual("(add z1)\nz1\n").unwrap_err();
        assert_eq!(err.position, 7);
        assert!(err.message.contains("two operands"));
    }

    #[test]
    fn unknown_tokens_and_operators_are_rejected() {
        let err = parse_individual("(div z1 z1)\nz1\n").unwrap_err();
        assert!(err.message.contains("unknown operator"));
        let err = parse_individual("(add q z1)\nz1\n").unwrap_err();
        assert!(err.message.contains("unknown token"));
        assert_eq!(err.position, 5);
    }

    #[test]
    fn variable_bounds_are_checked() {
        let err = parse_individual("(add z3 z1)\nz1\n").unwrap_err();
        assert!(err.message.contains("exceeds"));
        let err = parse_individual("z0\nz1\n").unwrap_err();
        assert!(err.message.contains("1-based"));
        let err = parse_individual("z1\ny1\n").unwrap_err();
        assert!(err.message.contains("not allowed in the readout"));
    }

    #[test]
    fn single_line_is_rejected() {
        let err = parse_individual("(mul 2 z1)\n").unwrap_err();
        assert!(err.message.contains("at least one state equation"));
    }

    #[test]
    fn round_trips_random_individuals() {
        let gp = GpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut next_id = 0;
        for _ in 0..1000 {
            let ind = random_individual(&mut rng, 2, 2, &gp, &mut next_id);
            let text = serialize_individual(&ind);
            let back = parse_individual(&text).unwrap();
            assert_eq!(back.state_trees, ind.state_trees);
            assert_eq!(back.readout_tree, ind.readout_tree);
        }
    }
}
