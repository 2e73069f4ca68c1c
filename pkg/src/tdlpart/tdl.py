"""Tensor description language: AST, parser, pretty-printer and classifier.

An operator is written as a lambda from output coordinates to a value::

    def conv1d(data(3), filters(3)) -> lambda b, co, x:
        reduce(Sum; ci, dx; data[b, ci, x + dx] * filters[ci, co, dx])

    def batch_cholesky(batch_mat(3)) -> lambda b, i, j:
        opaque(Cholesky; batch_mat[b, :, :])[i, j]

The grammar (EBNF; ``#`` starts a line comment)::

    program  = { definition } ;
    definition = "def" NAME "(" [ param { "," param } ] ")" "->"
                 "lambda" names ":" body ;
    param    = NAME "(" INT ")" ;
    names    = NAME { "," NAME } ;
    body     = "reduce" "(" REDUCER ";" names ";" expr ")" | expr ;
    expr     = term { ("+" | "-") term } ;
    term     = unary { ("*" | "/") unary } ;
    unary    = "-" unary | primary ;
    primary  = NUMBER | NAME | NAME "[" index { "," index } "]"
             | "opaque" "(" NAME ";" NAME "[" slot { "," slot } "]" ")"
               "[" index { "," index } "]"
             | "(" expr ")" ;
    slot     = ":" | index ;
    index    = expr ;   (* must be affine in index variables, integer coefficients *)
    REDUCER  = "Sum" | "Max" | "Min" | "Prod" ;

Index expressions are normalised to :class:`Affine`.  Each index variable may
address at most one dimension of any single tensor access.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Iterator, Mapping, Optional, Sequence, Union

from .errors import (
    AssumptionViolation,
    NestedReduce,
    NonAffineIndex,
    RankMismatch,
    TdlSyntaxError,
    UndeclaredTensor,
    UnknownIndexVar,
)

REDUCERS = ("Sum", "Max", "Min", "Prod")
KEYWORDS = {"def", "lambda", "reduce", "opaque"}


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Affine:
    """``sum(coeff * var) + const`` with integer coefficients."""

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    @staticmethod
    def make(coeffs: Mapping[str, int], const: int = 0) -> "Affine":
        terms = tuple(sorted((v, int(c)) for v, c in coeffs.items() if c != 0))
        return Affine(terms, int(const))

    @staticmethod
    def var(name: str) -> "Affine":
        return Affine(((name, 1),), 0)

    @property
    def coeffs(self) -> dict[str, int]:
        return dict(self.terms)

    @property
    def vars(self) -> tuple[str, ...]:
        return tuple(v for v, _ in self.terms)

    def single_var(self) -> Optional[str]:
        """The variable if this expression is exactly ``v``."""
        if self.const == 0 and len(self.terms) == 1 and self.terms[0][1] == 1:
            return self.terms[0][0]
        return None

    def __str__(self) -> str:
        parts: list[str] = []
        for v, c in self.terms:
            mag = abs(c)
            text = v if mag == 1 else f"{mag}*{v}"
            if not parts:
                parts.append(text if c > 0 else f"-{text}")
            else:
                parts.append(f"+ {text}" if c > 0 else f"- {text}")
        if self.const or not parts:
            if not parts:
                parts.append(str(self.const))
            elif self.const > 0:
                parts.append(f"+ {self.const}")
            else:
                parts.append(f"- {-self.const}")
        return " ".join(parts)


@dataclass(frozen=True)
class IndexVar:
    name: str


@dataclass(frozen=True)
class Const:
    value: Union[int, float]


@dataclass(frozen=True)
class TensorAccess:
    tensor: str
    indices: tuple[Affine, ...]


@dataclass(frozen=True)
class Arith:
    op: str  # one of + - * /
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Reduce:
    reducer: str
    vars: tuple[str, ...]
    body: "Expr"


@dataclass(frozen=True)
class OpaqueCall:
    """``opaque(fn; tensor[slots])[result]``; a ``None`` slot is ``:``."""

    fn: str
    tensor: str
    slots: tuple[Optional[Affine], ...]
    result: tuple[Affine, ...]


Expr = Union[IndexVar, Const, TensorAccess, Arith, Reduce, OpaqueCall]


@dataclass(frozen=True)
class OperatorDef:
    name: str
    params: tuple[tuple[str, int], ...]
    output_vars: tuple[str, ...]
    body: Expr
    reduce_vars: tuple[str, ...] = ()

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.params)

    def rank_of(self, tensor: str) -> int:
        return dict(self.params)[tensor]

    @property
    def reducer(self) -> Optional[str]:
        return self.body.reducer if isinstance(self.body, Reduce) else None

    @property
    def inner(self) -> Expr:
        """Body with the top-level reducer stripped."""
        return self.body.body if isinstance(self.body, Reduce) else self.body

    def accesses(self) -> list[TensorAccess]:
        return [n for n in walk(self.body) if isinstance(n, TensorAccess)]

    def opaque_calls(self) -> list[OpaqueCall]:
        return [n for n in walk(self.body) if isinstance(n, OpaqueCall)]

    def __str__(self) -> str:
        return format_def(self)


@dataclass(frozen=True)
class TdlProgram:
    defs: Mapping[str, OperatorDef] = field(default_factory=dict)

    def __getitem__(self, name: str) -> OperatorDef:
        return self.defs[name]

    def __contains__(self, name: str) -> bool:
        return name in self.defs

    def __iter__(self) -> Iterator[str]:
        return iter(self.defs)

    def __len__(self) -> int:
        return len(self.defs)

    def merged(self, other: "TdlProgram") -> "TdlProgram":
        return TdlProgram({**self.defs, **other.defs})


def walk(expr: Expr) -> Iterator[Expr]:
    yield expr
    if isinstance(expr, Arith):
        yield from walk(expr.lhs)
        yield from walk(expr.rhs)
    elif isinstance(expr, Reduce):
        yield from walk(expr.body)


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<number>\d+\.\d*(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+|\.\d+(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<arrow>->)
  | (?P<punct>[()\[\],;:+\-*/])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            line, col = _line_col(source, pos)
            raise TdlSyntaxError(f"unexpected character {source[pos]!r}", pos, line, col)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if kind == "name" and text in KEYWORDS:
                kind = text
            elif kind in ("punct", "arrow"):
                kind = text
            toks.append(_Tok(kind, text, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(source)))
    return toks


def _line_col(source: str, pos: int) -> tuple[int, int]:
    line = source.count("\n", 0, pos) + 1
    col = pos - (source.rfind("\n", 0, pos) + 1) + 1
    return line, col


# ---------------------------------------------------------------------------
# Parser

class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.toks = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, expected: str) -> TdlSyntaxError:
        t = self.tok
        line, col = _line_col(self.source, t.pos)
        found = t.text or "end of input"
        return TdlSyntaxError(f"expected {expected}, found {found!r}", t.pos, line, col, expected)

    def accept(self, kind: str) -> Optional[_Tok]:
        if self.tok.kind == kind:
            t = self.tok
            self.i += 1
            return t
        return None

    def expect(self, kind: str, what: Optional[str] = None) -> _Tok:
        t = self.accept(kind)
        if t is None:
            raise self.error(what or repr(kind))
        return t

    def names(self) -> tuple[str, ...]:
        out = [self.expect("name", "identifier").text]
        while self.accept(","):
            out.append(self.expect("name", "identifier").text)
        return tuple(out)

    def program(self) -> list[OperatorDef]:
        defs = []
        while self.tok.kind != "eof":
            defs.append(self.definition())
        return defs

    def definition(self) -> OperatorDef:
        self.expect("def", "'def'")
        name = self.expect("name", "operator name").text
        self.expect("(")
        params: list[tuple[str, int]] = []
        if self.tok.kind != ")":
            params.append(self.param())
            while self.accept(","):
                params.append(self.param())
        self.expect(")")
        self.expect("->")
        self.expect("lambda", "'lambda'")
        out_vars = self.names()
        self.expect(":")
        body = self.expr()
        reduce_vars = body.vars if isinstance(body, Reduce) else ()
        return OperatorDef(name, tuple(params), out_vars, body, reduce_vars)

    def param(self) -> tuple[str, int]:
        name = self.expect("name", "tensor name").text
        self.expect("(")
        rank_tok = self.expect("number", "rank")
        if not rank_tok.text.isdigit():
            raise TdlSyntaxError(f"rank must be an integer, got {rank_tok.text}")
        self.expect(")")
        return name, int(rank_tok.text)

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind in ("+", "-"):
            op = self.tok.kind
            self.i += 1
            node = Arith(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind in ("*", "/"):
            op = self.tok.kind
            self.i += 1
            node = Arith(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.accept("-"):
            return Arith("-", Const(0), self.unary())
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            self.i += 1
            return Const(_number(t.text))
        if t.kind == "(":
            self.i += 1
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "reduce":
            self.i += 1
            self.expect("(")
            red = self.expect("name", "reducer").text
            if red not in REDUCERS:
                self.i -= 1
                raise self.error("one of " + ", ".join(REDUCERS))
            self.expect(";")
            rvars = self.names()
            self.expect(";")
            body = self.expr()
            self.expect(")")
            return Reduce(red, rvars, body)
        if t.kind == "opaque":
            self.i += 1
            self.expect("(")
            fn = self.expect("name", "opaque function name").text
            self.expect(";")
            tensor = self.expect("name", "tensor name").text
            self.expect("[")
            slots = [self.slot()]
            while self.accept(","):
                slots.append(self.slot())
            self.expect("]")
            self.expect(")")
            self.expect("[", "'[' with result indices")
            result = self.index_list()
            return OpaqueCall(fn, tensor, tuple(slots), result)
        if t.kind == "name":
            self.i += 1
            if self.accept("["):
                return TensorAccess(t.text, self.index_list())
            return IndexVar(t.text)
        raise self.error("expression")

    def slot(self) -> Optional[Affine]:
        if self.accept(":"):
            return None
        return self.index()

    def index_list(self) -> tuple[Affine, ...]:
        idx = [self.index()]
        while self.accept(","):
            idx.append(self.index())
        self.expect("]")
        return tuple(idx)

    def index(self) -> Affine:
        start = self.tok
        node = self.expr()
        try:
            return _to_affine(node)
        except NonAffineIndex as e:
            line, col = _line_col(self.source, start.pos)
            raise NonAffineIndex(f"{e} (line {line}, column {col})") from None


def _number(text: str) -> Union[int, float]:
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


def _to_affine(node: Expr) -> Affine:
    if isinstance(node, IndexVar):
        return Affine.var(node.name)
    if isinstance(node, Const):
        if float(node.value) != int(node.value):
            raise NonAffineIndex(f"non-integer constant {node.value} in index")
        return Affine((), int(node.value))
    if isinstance(node, Arith):
        a = _to_affine(node.lhs)
        b = _to_affine(node.rhs)
        if node.op in "+-":
            sign = 1 if node.op == "+" else -1
            coeffs = a.coeffs
            for v, c in b.terms:
                coeffs[v] = coeffs.get(v, 0) + sign * c
            return Affine.make(coeffs, a.const + sign * b.const)
        if node.op == "*":
            if a.terms and b.terms:
                raise NonAffineIndex("product of index variables in index")
            k, e = (a.const, b) if not a.terms else (b.const, a)
            return Affine.make({v: c * k for v, c in e.terms}, e.const * k)
        raise NonAffineIndex("division in index expression")
    if isinstance(node, (TensorAccess, OpaqueCall)):
        raise NonAffineIndex("data-dependent indexing is not supported")
    raise NonAffineIndex("reduction inside an index expression")


# ---------------------------------------------------------------------------
# Validation

def validate_def(d: OperatorDef) -> OperatorDef:
    params = dict(d.params)
    if len(params) != len(d.params):
        raise TdlSyntaxError(f"{d.name}: duplicate parameter name")
    for p, r in d.params:
        if r < 1:
            raise RankMismatch(f"{d.name}: tensor {p} must have rank >= 1")
    if len(set(d.output_vars)) != len(d.output_vars):
        raise TdlSyntaxError(f"{d.name}: duplicate output index variable")
    if len(set(d.reduce_vars)) != len(d.reduce_vars):
        raise TdlSyntaxError(f"{d.name}: duplicate reduction variable")
    clash = set(d.output_vars) & set(d.reduce_vars)
    if clash:
        raise TdlSyntaxError(f"{d.name}: reduction variable shadows output variable {sorted(clash)[0]}")
    clash = set(d.output_vars + d.reduce_vars) & set(params)
    if clash:
        raise TdlSyntaxError(f"{d.name}: index variable named like a tensor: {sorted(clash)[0]}")

    if isinstance(d.body, Reduce):
        for node in walk(d.body.body):
            if isinstance(node, Reduce):
                raise NestedReduce(f"{d.name}: nested reduce() is not supported")
    else:
        for node in walk(d.body):
            if isinstance(node, Reduce):
                raise NestedReduce(f"{d.name}: reduce() must be the whole body")

    known = set(d.output_vars) | set(d.reduce_vars)

    def check_vars(vs: Sequence[str]) -> None:
        for v in vs:
            if v not in known:
                raise UnknownIndexVar(f"{d.name}: unknown index variable {v!r}")

    def check_one_dim(tensor: str, idx: Sequence[Optional[Affine]]) -> None:
        seen: set[str] = set()
        for ix in idx:
            if ix is None:
                continue
            check_vars(ix.vars)
            for v in ix.vars:
                if v in seen:
                    raise AssumptionViolation(
                        f"{d.name}: index variable {v!r} addresses more than one "
                        f"dimension of {tensor}")
                seen.add(v)

    for node in walk(d.body):
        if isinstance(node, IndexVar):
            if node.name in params:
                raise RankMismatch(f"{d.name}: tensor {node.name} used without indices")
            check_vars([node.name])
        elif isinstance(node, TensorAccess):
            if node.tensor not in params:
                raise UndeclaredTensor(f"{d.name}: undeclared tensor {node.tensor!r}")
            if len(node.indices) != params[node.tensor]:
                raise RankMismatch(
                    f"{d.name}: {node.tensor} has rank {params[node.tensor]} "
                    f"but is indexed with {len(node.indices)} indices")
            check_one_dim(node.tensor, node.indices)
        elif isinstance(node, OpaqueCall):
            if node.tensor not in params:
                raise UndeclaredTensor(f"{d.name}: undeclared tensor {node.tensor!r}")
            if len(node.slots) != params[node.tensor]:
                raise RankMismatch(
                    f"{d.name}: {node.tensor} has rank {params[node.tensor]} "
                    f"but opaque call passes {len(node.slots)} slots")
            check_one_dim(node.tensor, node.slots)
            n_slices = sum(s is None for s in node.slots)
            if len(node.result) > max(n_slices, 1):
                raise RankMismatch(f"{d.name}: too many result indices on opaque {node.fn}")
            for r in node.result:
                check_vars(r.vars)
    return d


def parse_tdl(source: str) -> TdlProgram:
    """Parse and validate TDL source text."""
    defs: dict[str, OperatorDef] = {}
    for d in _Parser(source).program():
        if d.name in defs:
            raise TdlSyntaxError(f"duplicate definition of {d.name!r}")
        defs[d.name] = validate_def(d)
    return TdlProgram(defs)


def parse_def(source: str) -> OperatorDef:
    prog = parse_tdl(source)
    if len(prog) != 1:
        raise TdlSyntaxError(f"expected exactly one definition, found {len(prog)}")
    return next(iter(prog.defs.values()))


def load_corpus() -> TdlProgram:
    """The operator descriptions shipped with the package."""
    text = resources.files("tdlpart").joinpath("corpus.tdl").read_text(encoding="utf-8")
    return parse_tdl(text)


def load_program(path: Optional[str]) -> TdlProgram:
    if path is None:
        return load_corpus()
    with open(path, encoding="utf-8") as f:
        return parse_tdl(f.read())


# ---------------------------------------------------------------------------
# Pretty printing

def format_expr(e: Expr) -> str:
    if isinstance(e, IndexVar):
        return e.name
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, TensorAccess):
        return f"{e.tensor}[{', '.join(map(str, e.indices))}]"
    if isinstance(e, Arith):
        return f"({format_expr(e.lhs)} {e.op} {format_expr(e.rhs)})"
    if isinstance(e, Reduce):
        return f"reduce({e.reducer}; {', '.join(e.vars)}; {format_expr(e.body)})"
    if isinstance(e, OpaqueCall):
        slots = ", ".join(":" if s is None else str(s) for s in e.slots)
        return f"opaque({e.fn}; {e.tensor}[{slots}])[{', '.join(map(str, e.result))}]"
    raise TypeError(f"not an expression: {e!r}")


def format_def(d: OperatorDef) -> str:
    params = ", ".join(f"{p}({r})" for p, r in d.params)
    return f"def {d.name}({params}) -> lambda {', '.join(d.output_vars)}: {format_expr(d.body)}"


def format_program(prog: TdlProgram) -> str:
    return "".join(format_def(d) + "\n" for d in prog.defs.values())


# ---------------------------------------------------------------------------
# Classification

@dataclass(frozen=True)
class ElementWise:
    pass


@dataclass(frozen=True)
class Reduction:
    dims: tuple[str, ...]


@dataclass(frozen=True)
class OpaqueBatched:
    dims: tuple[str, ...]


@dataclass(frozen=True)
class General:
    pass


OpClass = Union[ElementWise, Reduction, OpaqueBatched, General]


def opaque_blocked_vars(d: OperatorDef) -> set[str]:
    """Index variables that only select inside an opaque function's result."""
    blocked: set[str] = set()
    for call in d.opaque_calls():
        for r in call.result:
            blocked.update(r.vars)
    return blocked


def classify(d: OperatorDef) -> OpClass:
    calls = d.opaque_calls()
    if calls:
        blocked = opaque_blocked_vars(d)
        return OpaqueBatched(tuple(v for v in d.output_vars if v not in blocked))
    if isinstance(d.body, Reduce):
        return Reduction(d.reduce_vars)
    identity = tuple(Affine.var(v) for v in d.output_vars)
    accs = d.accesses()
    used = {a.tensor for a in accs}
    if accs and used == set(d.param_names) and all(a.indices == identity for a in accs):
        return ElementWise()
    return General()


def is_elementwise(d: OperatorDef) -> bool:
    return isinstance(classify(d), ElementWise)


def as_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)
