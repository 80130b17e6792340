//! Bracketed constituency trees and referring-expression extraction.
//!
//! Trees use Penn-Treebank bracketing, one tree per line:
//! `(S (NP (DT the) (NN man)) (VP (VBZ stands)))`. A preterminal such as
//! `(DT the)` is a leaf carrying both its tag and its token.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseNode {
    pub label: String,
    pub children: Vec<ParseNode>,
    /// Present exactly for leaves.
    pub token: Option<String>,
    /// Inclusive token span.
    pub span: (usize, usize),
}

impl ParseNode {
    pub fn is_leaf(&self) -> bool {
        self.token.is_some()
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a ParseNode)) {
        visit(self);
        for c in &self.children {
            c.walk(visit);
        }
    }

    fn write_bracketed(&self, out: &mut String) {
        out.push('(');
        out.push_str(&self.label);
        if let Some(tok) = &self.token {
            out.push(' ');
            out.push_str(tok);
        }
        for c in &self.children {
            out.push(' ');
            c.write_bracketed(out);
        }
        out.push(')');
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub root: ParseNode,
}

impl ParseTree {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.root.walk(&mut |n| {
            if let Some(t) = &n.token {
                out.push(t.clone());
            }
        });
        out
    }

    pub fn len(&self) -> usize {
        self.root.span.1 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bracketed(&self) -> String {
        let mut s = String::new();
        self.root.write_bracketed(&mut s);
        s
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bracketed())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferringExpression {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<String>,
    pub tag: String,
}

impl ReferringExpression {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    next_token: usize,
}

impl Parser<'_> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(GapError::Parse {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_whitespace() || c == b'(' || c == b')' {
                break;
            }
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn node(&mut self) -> Result<ParseNode> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return self.err(self.pos, "expected `(`, found end of input");
        }
        if self.src[self.pos] != b'(' {
            return self.err(self.pos, "expected `(`");
        }
        let open = self.pos;
        self.pos += 1;
        let label_at = self.pos;
        let label = self.atom();
        if label.is_empty() {
            if self.pos < self.src.len() && self.src[self.pos] == b')' {
                return self.err(open, "empty node");
            }
            return self.err(label_at, "node without a label");
        }
        self.skip_ws();
        if self.pos >= self.src.len() {
            return self.err(self.pos, "unbalanced parentheses: missing `)`");
        }
        if self.src[self.pos] == b')' {
            return self.err(open, format!("node `{label}` has no children or token"));
        }
        if self.src[self.pos] != b'(' {
            let token = self.atom();
            self.skip_ws();
            if self.pos >= self.src.len() {
                return self.err(self.pos, "unbalanced parentheses: missing `)`");
            }
            if self.src[self.pos] != b')' {
                return self.err(self.pos, format!("leaf `{label}` has more than one token"));
            }
            self.pos += 1;
            let idx = self.next_token;
            self.next_token += 1;
            return Ok(ParseNode {
                label,
                children: Vec::new(),
                token: Some(token),
                span: (idx, idx),
            });
        }
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= self.src.len() {
                return self.err(self.pos, "unbalanced parentheses: missing `)`");
            }
            match self.src[self.pos] {
                b')' => {
                    self.pos += 1;
                    break;
                }
                b'(' => children.push(self.node()?),
                _ => return self.err(self.pos, "token mixed with child nodes"),
            }
        }
        let span = (children[0].span.0, children[children.len() - 1].span.1);
        Ok(ParseNode {
            label,
            children,
            token: None,
            span,
        })
    }
}

/// Parse one bracketed tree. Errors carry the byte offset of the problem.
pub fn parse_bracketed(text: &str) -> Result<ParseTree> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        next_token: 0,
    };
    let root = p.node()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return p.err(p.pos, "trailing input after tree");
    }
    Ok(ParseTree { root })
}

/// Node labels that count as referring expressions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefTags(pub Vec<String>);

impl Default for RefTags {
    fn default() -> Self {
        RefTags(vec!["NP".into(), "WHNP".into()])
    }
}

impl RefTags {
    pub fn matches(&self, label: &str) -> bool {
        self.0.iter().any(|t| t == label)
    }
}

pub fn extract_referring_expressions(tree: &ParseTree) -> Vec<ReferringExpression> {
    extract_with_tags(tree, &RefTags::default())
}

/// Every node whose label is in `tags` yields one RE; identical spans are
/// kept once (the outermost node wins) and the result is sorted by span.
pub fn extract_with_tags(tree: &ParseTree, tags: &RefTags) -> Vec<ReferringExpression> {
    let tokens = tree.tokens();
    let mut out: Vec<ReferringExpression> = Vec::new();
    tree.root.walk(&mut |n| {
        if tags.matches(&n.label) && !out.iter().any(|r| (r.start, r.end) == n.span) {
            out.push(ReferringExpression {
                start: n.span.0,
                end: n.span.1,
                tokens: tokens[n.span.0..=n.span.1].to_vec(),
                tag: n.label.clone(),
            });
        }
    });
    out.sort_by_key(|r| (r.start, r.end));
    out
}

/// Number of REs covering each of `len` token positions.
pub fn re_coverage(res: &[ReferringExpression], len: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; len];
    for r in res {
        if r.start > r.end || r.end >= len {
            return Err(GapError::SpanOutOfRange {
                start: r.start,
                end: r.end,
                len,
            });
        }
        for c in &mut counts[r.start..=r.end] {
            *c += 1;
        }
    }
    Ok(counts)
}
