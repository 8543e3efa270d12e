//! A small arithmetic expression grammar for user-declared coefficients
//! and payoffs.
//!
//! Supported: `+ - * / ^`, `exp log sin cos min max`, numeric literals,
//! the constants `pi` and `e`, the time variable `t` and the spatial
//! variables `x1..xd`.

use crate::error::{Result, SglError};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Time,
    Coord(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(SglError::ExprParse(format!(
                "unexpected trailing input at token {} in `{src}`",
                p.pos
            )));
        }
        Ok(e)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Time => t,
            Expr::Coord(i) => x.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Neg(a) => -a.eval(t, x),
            Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Expr::Pow(a, b) => a.eval(t, x).powf(b.eval(t, x)),
            Expr::Exp(a) => a.eval(t, x).exp(),
            Expr::Log(a) => a.eval(t, x).ln(),
            Expr::Sin(a) => a.eval(t, x).sin(),
            Expr::Cos(a) => a.eval(t, x).cos(),
            Expr::Min(a, b) => a.eval(t, x).min(b.eval(t, x)),
            Expr::Max(a, b) => a.eval(t, x).max(b.eval(t, x)),
        }
    }

    /// Largest spatial index referenced, if any (0-based).
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Expr::Const(_) | Expr::Time => None,
            Expr::Coord(i) => Some(*i),
            Expr::Neg(a) | Expr::Exp(a) | Expr::Log(a) | Expr::Sin(a) | Expr::Cos(a) => {
                a.max_coord()
            }
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => match (a.max_coord(), b.max_coord()) {
                (Some(i), Some(j)) => Some(i.max(j)),
                (Some(i), None) | (None, Some(i)) => Some(i),
                (None, None) => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' | '\u{2212}' => {
                out.push(Tok::Minus);
                i += c.len_utf8();
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let s = &src[start..i];
                let v: f64 = s
                    .parse()
                    .map_err(|_| SglError::ExprParse(format!("bad number `{s}`")))?;
                out.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => {
                return Err(SglError::ExprParse(format!(
                    "unexpected character `{c}` in `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<()> {
        match self.bump() {
            Some(t) if t == tok => Ok(()),
            other => Err(SglError::ExprParse(format!(
                "expected {tok:?}, found {other:?} in `{}`",
                self.src
            ))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // Right-associative, binds tighter than unary minus on the left
    // (so -x^2 parses as -(x^2)).
    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => self.ident(name),
            other => Err(SglError::ExprParse(format!(
                "unexpected token {other:?} in `{}`",
                self.src
            ))),
        }
    }

    fn ident(&mut self, name: String) -> Result<Expr> {
        match name.as_str() {
            "t" => Ok(Expr::Time),
            "pi" => Ok(Expr::Const(std::f64::consts::PI)),
            "e" => Ok(Expr::Const(std::f64::consts::E)),
            "exp" | "log" | "sin" | "cos" => {
                self.expect(Tok::LParen)?;
                let a = self.expr()?;
                self.expect(Tok::RParen)?;
                let b = Box::new(a);
                Ok(match name.as_str() {
                    "exp" => Expr::Exp(b),
                    "log" => Expr::Log(b),
                    "sin" => Expr::Sin(b),
                    _ => Expr::Cos(b),
                })
            }
            "min" | "max" => {
                self.expect(Tok::LParen)?;
                let a = self.expr()?;
                self.expect(Tok::Comma)?;
                let b = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(if name == "min" {
                    Expr::Min(Box::new(a), Box::new(b))
                } else {
                    Expr::Max(Box::new(a), Box::new(b))
                })
            }
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(i) = rest.parse::<usize>() {
                        if i >= 1 {
                            return Ok(Expr::Coord(i - 1));
                        }
                    }
                }
                Err(SglError::ExprParse(format!(
                    "unknown identifier `{name}` in `{}`",
                    self.src
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, t: f64, x: &[f64]) -> f64 {
        Expr::parse(src).unwrap().eval(t, x)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1+2*3", 0.0, &[]), 7.0);
        assert_eq!(ev("(1+2)*3", 0.0, &[]), 9.0);
        assert_eq!(ev("2^3^2", 0.0, &[]), 512.0); // right-assoc
        assert_eq!(ev("-2^2", 0.0, &[]), -4.0);
    }

    #[test]
    fn variables_and_functions() {
        assert_eq!(ev("max(100-x1,0)", 0.0, &[90.0]), 10.0);
        assert_eq!(ev("max(100-x1,0)", 0.0, &[110.0]), 0.0);
        assert!((ev("exp(log(x2))", 0.0, &[1.0, 2.5]) - 2.5).abs() < 1e-12);
        assert_eq!(ev("2-t", 0.75, &[]), 1.25);
        assert!((ev("sin(pi/2)", 0.0, &[]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_coord_tracks_variables() {
        assert_eq!(Expr::parse("x1*x3").unwrap().max_coord(), Some(2));
        assert_eq!(Expr::parse("t+1").unwrap().max_coord(), None);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("x0").is_err());
        assert!(Expr::parse("1+").is_err());
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("min(1)").is_err());
    }
}
