"""LOOP language: parser, AST and the exact reference interpreter.

The interpreter is the ground-truth oracle for every dynamical backend:
whatever a compiled system computes is checked against ``interpret``.

Grammar (identifiers ``[a-zA-Z_][a-zA-Z0-9_]*``, ``#`` starts a line comment,
statements separated by ``;`` or newline)::

    program ::= "prog" NAME "(" ids ")" "->" ids "{" stmts "}"
    stmt    ::= ID ":=" "0"
              | ID ":=" ID
              | ID ":=" ID "+" "1"
              | "for" ID "do" stmts "end"

Auxiliary registers are implicitly declared on first use and start at 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ArityMismatch, LoopSyntaxError

KEYWORDS = {"prog", "for", "do", "end"}

_TOKEN_RE = re.compile(
    r"""(?P<ws>[ \t\r]+)
      | (?P<comment>\#[^\n]*)
      | (?P<nl>\n)
      | (?P<assign>:=)
      | (?P<arrow>->)
      | (?P<num>0|1)
      | (?P<id>[a-zA-Z_][a-zA-Z0-9_]*)
      | (?P<punct>[(){},;+])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise LoopSyntaxError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            tokens.append(Token("nl", text, line, col))
            line += 1
            col = 1
        elif kind in ("ws", "comment"):
            col += len(text)
        else:
            tokens.append(Token(kind, text, line, col))
            col += len(text)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


# --- AST ---

@dataclass(frozen=True)
class Clear:
    """R_i := 0"""
    reg: int


@dataclass(frozen=True)
class Copy:
    """R_i := R_j"""
    dst: int
    src: int


@dataclass(frozen=True)
class IncrCopy:
    """R_i := R_j + 1"""
    dst: int
    src: int


@dataclass(frozen=True)
class For:
    """Iterate body as many times as the loop register held at entry."""
    reg: int
    body: tuple


Instr = Clear | Copy | IncrCopy | For


@dataclass(frozen=True)
class LoopProgram:
    name: str
    in_arity: int
    out_arity: int
    num_registers: int
    body: tuple
    output_registers: tuple
    register_names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.in_arity > self.num_registers:
            raise ArityMismatch(
                f"{self.in_arity} inputs but only {self.num_registers} registers"
            )
        for i in self.output_registers:
            if not 0 <= i < self.num_registers:
                raise ArityMismatch(f"output register {i} out of range")
        _check_body(self.body, self.num_registers)

    @property
    def max_for_depth(self) -> int:
        return _for_depth(self.body)


def _check_body(body, num_registers):
    for instr in body:
        for r in _instr_registers(instr):
            if not 0 <= r < num_registers:
                raise ArityMismatch(f"register index {r} out of range")
        if isinstance(instr, For):
            _check_body(instr.body, num_registers)


def _instr_registers(instr):
    if isinstance(instr, Clear):
        return (instr.reg,)
    if isinstance(instr, (Copy, IncrCopy)):
        return (instr.dst, instr.src)
    if isinstance(instr, For):
        return (instr.reg,)
    raise TypeError(instr)


def _for_depth(body) -> int:
    depth = 0
    for instr in body:
        if isinstance(instr, For):
            depth = max(depth, 1 + _for_depth(instr.body))
    return depth


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.registers: dict[str, int] = {}

    def peek(self, skip_nl=True) -> Token:
        i = self.pos
        while skip_nl and self.tokens[i].kind == "nl":
            i += 1
        return self.tokens[i]

    def next(self, skip_nl=True) -> Token:
        while skip_nl and self.tokens[self.pos].kind == "nl":
            self.pos += 1
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise LoopSyntaxError(f"expected {text!r}, found {tok.text!r}", tok.line, tok.col)
        return tok

    def ident(self, *, declare: bool) -> int:
        tok = self.next()
        if tok.kind != "id":
            raise LoopSyntaxError(f"expected identifier, found {tok.text!r}", tok.line, tok.col)
        if tok.text in KEYWORDS:
            raise LoopSyntaxError(f"keyword {tok.text!r} cannot be a register", tok.line, tok.col)
        name = tok.text
        if name not in self.registers:
            if not declare:
                raise LoopSyntaxError(f"undeclared register {name!r}", tok.line, tok.col)
            self.registers[name] = len(self.registers)
        return self.registers[name]

    def parse_program(self) -> LoopProgram:
        self.expect("prog")
        name_tok = self.next()
        if name_tok.kind != "id":
            raise LoopSyntaxError("expected program name", name_tok.line, name_tok.col)
        self.expect("(")
        params = []
        if self.peek().text != ")":
            params.append(self.ident(declare=True))
            while self.peek().text == ",":
                self.next()
                params.append(self.ident(declare=True))
        self.expect(")")
        if len(set(params)) != len(params):
            raise ArityMismatch("duplicate input parameter")
        self.expect("->")
        outputs = [self.ident(declare=True)]
        while self.peek().text == ",":
            self.next()
            outputs.append(self.ident(declare=True))
        self.expect("{")
        body = self.parse_stmts(terminators=("}",))
        self.expect("}")
        tok = self.next()
        if tok.kind != "eof":
            raise LoopSyntaxError(f"trailing input {tok.text!r}", tok.line, tok.col)
        names = tuple(sorted(self.registers, key=self.registers.get))
        return LoopProgram(
            name=name_tok.text,
            in_arity=len(params),
            out_arity=len(outputs),
            num_registers=len(self.registers),
            body=tuple(body),
            output_registers=tuple(outputs),
            register_names=names,
        )

    def parse_stmts(self, terminators) -> list[Instr]:
        stmts = []
        while True:
            while self.peek(skip_nl=False).kind == "nl" or self.peek(skip_nl=False).text == ";":
                self.next(skip_nl=False)
            if self.peek().text in terminators or self.peek().kind == "eof":
                return stmts
            stmts.append(self.parse_stmt())
            nxt = self.peek(skip_nl=False)
            if nxt.text in terminators:
                continue
            if nxt.kind not in ("nl",) and nxt.text != ";":
                raise LoopSyntaxError(
                    f"expected ';' or newline, found {nxt.text!r}", nxt.line, nxt.col
                )

    def parse_stmt(self) -> Instr:
        tok = self.peek()
        if tok.text == "for":
            self.next()
            reg = self.ident(declare=True)
            self.expect("do")
            body = self.parse_stmts(terminators=("end",))
            self.expect("end")
            return For(reg, tuple(body))
        dst = self.ident(declare=True)
        self.expect(":=")
        rhs = self.next()
        if rhs.kind == "num":
            if rhs.text != "0":
                raise LoopSyntaxError("only 0 may appear alone on the right", rhs.line, rhs.col)
            return Clear(dst)
        if rhs.kind != "id" or rhs.text in KEYWORDS:
            raise LoopSyntaxError(f"expected register or 0, found {rhs.text!r}", rhs.line, rhs.col)
        if rhs.text not in self.registers:
            self.registers[rhs.text] = len(self.registers)
        src = self.registers[rhs.text]
        if self.peek(skip_nl=False).text == "+":
            self.next()
            one = self.next()
            if one.text != "1":
                raise LoopSyntaxError("only '+ 1' is allowed", one.line, one.col)
            return IncrCopy(dst, src)
        return Copy(dst, src)


def parse_loop(source: str) -> LoopProgram:
    """Parse LOOP source text into a :class:`LoopProgram`."""
    return _Parser(_tokenize(source)).parse_program()


# --- interpreter ---

@dataclass(frozen=True)
class EvalResult:
    outputs: tuple
    machine_steps: int
    max_register: int


def interpret(prog: LoopProgram, x) -> EvalResult:
    """Run ``prog`` on the natural vector ``x``.

    Loop iteration counts are frozen at loop entry, so a body that mutates
    its own loop register never changes how often it runs.  ``machine_steps``
    counts atomic instructions, with loop entry and exit one step each;
    ``max_register`` is the largest value any register ever holds.
    """
    x = tuple(int(v) for v in x)
    if len(x) != prog.in_arity:
        raise ArityMismatch(f"expected {prog.in_arity} inputs, got {len(x)}")
    if any(v < 0 for v in x):
        raise ArityMismatch("inputs must be naturals")
    regs = [0] * prog.num_registers
    regs[: prog.in_arity] = x
    steps = 0
    high = max(regs, default=0)

    def run(body):
        nonlocal steps, high
        for instr in body:
            if isinstance(instr, Clear):
                regs[instr.reg] = 0
                steps += 1
            elif isinstance(instr, Copy):
                regs[instr.dst] = regs[instr.src]
                steps += 1
                high = max(high, regs[instr.dst])
            elif isinstance(instr, IncrCopy):
                regs[instr.dst] = regs[instr.src] + 1
                steps += 1
                high = max(high, regs[instr.dst])
            else:  # For
                count = regs[instr.reg]
                steps += 1
                for _ in range(count):
                    run(instr.body)
                steps += 1

    run(prog.body)
    return EvalResult(
        outputs=tuple(regs[i] for i in prog.output_registers),
        machine_steps=steps,
        max_register=high,
    )


def time_bound(prog: LoopProgram, x) -> int:
    return interpret(prog, x).machine_steps


def space_bound(prog: LoopProgram, x) -> int:
    return interpret(prog, x).max_register
