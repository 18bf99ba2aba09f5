"""Parsing of analytic field expressions.

Expressions are written over ``y1``, ``y2`` and ``|y|`` with ``+ - * / ^``
and the functions ``cos``, ``sin``, ``exp``.  They are parsed once with the
standard :mod:`ast` module, checked against a whitelist, and converted into
:mod:`sympy` expressions so that derivatives are exact.
"""

from __future__ import annotations

import ast

import sympy

Y1, Y2 = sympy.symbols("y1 y2", real=True)
RADIUS = sympy.sqrt(Y1**2 + Y2**2)

_NAMES = {"y1": Y1, "y2": Y2, "r": RADIUS, "pi": sympy.pi}
_FUNCS = {"cos": sympy.cos, "sin": sympy.sin, "exp": sympy.exp}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


class ExpressionError(ValueError):
    """Raised for expressions outside the supported grammar."""


def _normalise(text: str) -> str:
    return (
        text.replace("|y|", "r")
        .replace("^", "**")
        .replace("−", "-")
        .strip()
    )


def _convert(node: ast.AST, source: str) -> sympy.Expr:
    if isinstance(node, ast.Expression):
        return _convert(node.body, source)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return sympy.nsimplify(node.value) if isinstance(node.value, int) else sympy.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in _NAMES:
            raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
        return _NAMES[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_convert(node.left, source), _convert(node.right, source))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        operand = _convert(node.operand, source)
        return -operand if isinstance(node.op, ast.USub) else operand
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.func.id not in _FUNCS or node.keywords or len(node.args) != 1:
            raise ExpressionError(f"unsupported call {node.func.id!r} in {source!r}")
        return _FUNCS[node.func.id](_convert(node.args[0], source))
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {source!r}")


def parse_expression(text) -> sympy.Expr:
    """Parse ``text`` into a sympy expression in ``y1``, ``y2``.

    Numbers and sympy expressions are passed through unchanged.
    """
    if isinstance(text, sympy.Basic):
        return text
    if isinstance(text, (int, float)):
        return sympy.sympify(text)
    source = _normalise(str(text))
    if not source:
        raise ExpressionError("empty expression")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    return _convert(tree, str(text))
