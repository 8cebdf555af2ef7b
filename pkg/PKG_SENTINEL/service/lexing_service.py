"""
Business logic - Lexing
=======================
Best-effort lexers for JavaScript, Python and package.json.

Only four token kinds are produced (strings, identifiers, operators,
punctuation); numbers, comments and JavaScript regex literals are consumed
without emitting tokens. Lexing never raises: malformed input yields a
degraded stream with ``lex_error`` set.
"""

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum

from data.archives import FileRole, PackageArtifact, PackageFile


class TokenKind(str, Enum):
    STRING = "string"
    IDENTIFIER = "identifier"
    OPERATOR = "operator"
    PUNCTUATION = "punctuation"


class Language(str, Enum):
    JS = "js"
    PY = "py"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    byte_offset: int


@dataclass(frozen=True)
class TokenStream:
    file: str
    language: Language
    tokens: tuple[Token, ...] = field(default_factory=tuple)
    lex_error: bool = False

    def texts(self, kind: TokenKind) -> list[str]:
        return [t.text for t in self.tokens if t.kind is kind]

    @property
    def strings(self) -> list[str]:
        return self.texts(TokenKind.STRING)

    @property
    def identifiers(self) -> list[str]:
        return self.texts(TokenKind.IDENTIFIER)


# ---------------------------------------------------------------------------
# Token tables
# ---------------------------------------------------------------------------

_PY_OPERATORS = (
    "**=", "//=", ">>=", "<<=",
    "->", ":=", "**", "//", "<<", ">>", "<=", ">=", "==", "!=",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
    "+", "-", "*", "/", "%", "&", "|", "^", "~", "<", ">", "=", "@", "!",
)
_JS_OPERATORS = (
    ">>>=",
    "===", "!==", "**=", "<<=", ">>=", ">>>", "&&=", "||=", "??=",
    "=>", "==", "!=", "<=", ">=", "&&", "||", "??", "?.", "++", "--",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "**", "<<", ">>",
    "+", "-", "*", "/", "%", "&", "|", "^", "!", "~", "<", ">", "=", "?",
)
_PUNCTUATION = frozenset("()[]{},:;.")
_JSON_PUNCTUATION = frozenset("{}[]:,")
_ELLIPSIS = "..."

# Punctuation after which a JavaScript `/` opens a regex literal.
_JS_REGEX_PRECEDERS = frozenset("(,[{;:")

_PY_STRING_PREFIXES = frozenset({"r", "u", "b", "f", "br", "rb", "fr", "rf"})

_PY_IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_JS_IDENTIFIER = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_PY_NUMBER = re.compile(
    r"0[xXoObB][0-9a-fA-F_]+|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d[\d_]*)?[jJ]?"
)
_JS_NUMBER = re.compile(
    r"0[xXoObB][0-9a-fA-F_]+n?|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d[\d_]*)?n?"
)
_JSON_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")
_JSON_WORD = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")

_WHITESPACE = frozenset(" \t\r\n\f\v")

# Bodies stop before the closing delimiter or at end of input; they never
# need to backtrack because the delimiter is checked outside the pattern.
_STRING_BODIES = {
    "'": re.compile(r"(?:[^'\\]+|\\.)*", re.DOTALL),
    '"': re.compile(r'(?:[^"\\]+|\\.)*', re.DOTALL),
    "`": re.compile(r"(?:[^`\\]+|\\.)*", re.DOTALL),
    "'''": re.compile(r"(?:[^'\\]+|\\.|'(?!''))*", re.DOTALL),
    '"""': re.compile(r'(?:[^"\\]+|\\.|"(?!""))*', re.DOTALL),
}

# Sentinels for operands that emit no token but steer the regex heuristic.
_NUMBER = "number"
_REGEX = "regex"


# ---------------------------------------------------------------------------
# Decoding and offsets
# ---------------------------------------------------------------------------

def _decode(content: bytes) -> tuple[str, bool]:
    """UTF-8 decode; invalid bytes survive as surrogate escapes and set the flag."""
    try:
        return content.decode("utf-8"), False
    except UnicodeDecodeError:
        return content.decode("utf-8", errors="surrogateescape"), True


def _clean(text: str) -> str:
    """Swap surrogate escapes for U+FFFD."""
    return text.encode("utf-8", errors="surrogateescape").decode("utf-8", errors="replace")


class _ByteOffsets:
    """Maps non-decreasing character indexes to byte offsets of the original content."""

    def __init__(self, text: str):
        self._text = text
        self._ascii = text.isascii()
        self._char = 0
        self._byte = 0

    def at(self, index: int) -> int:
        if self._ascii:
            return index
        if index > self._char:
            chunk = self._text[self._char:index]
            self._byte += len(chunk.encode("utf-8", errors="surrogateescape"))
            self._char = index
        return self._byte


class _Scanner:
    """Shared cursor state for the three lexers."""

    def __init__(self, content: bytes):
        self.text, self.lex_error = _decode(content)
        self.n = len(self.text)
        self.pos = 0
        self.tokens: list[Token] = []
        self.prev: tuple[object, str] | None = None
        self._offsets = _ByteOffsets(self.text)
        self._dirty = self.lex_error

    def emit(self, kind: TokenKind, text: str, start: int) -> None:
        if self._dirty:
            text = _clean(text)
        self.tokens.append(Token(kind, text, self._offsets.at(start)))
        self.prev = (kind, text)

    def skip_line(self) -> None:
        end = self.text.find("\n", self.pos)
        self.pos = self.n if end < 0 else end + 1

    def scan_string(self, start: int, body_start: int, delimiter: str) -> None:
        """Emit the string whose body begins at body_start; unterminated runs to EOF."""
        end = _STRING_BODIES[delimiter].match(self.text, body_start).end()
        if self.text.startswith(delimiter, end):
            self.emit(TokenKind.STRING, self.text[body_start:end], start)
            self.pos = end + len(delimiter)
            return
        self.emit(TokenKind.STRING, self.text[body_start:], start)
        self.pos = self.n
        self.lex_error = True

    def scan_operator(self, operators: tuple[str, ...]) -> bool:
        if self.text.startswith(_ELLIPSIS, self.pos):
            self.emit(TokenKind.PUNCTUATION, _ELLIPSIS, self.pos)
            self.pos += len(_ELLIPSIS)
            return True
        for op in operators:
            if self.text.startswith(op, self.pos):
                self.emit(TokenKind.OPERATOR, op, self.pos)
                self.pos += len(op)
                return True
        ch = self.text[self.pos]
        if ch in _PUNCTUATION:
            self.emit(TokenKind.PUNCTUATION, ch, self.pos)
            self.pos += 1
            return True
        return False

    def stream(self, file: str, language: Language) -> TokenStream:
        return TokenStream(file=file, language=language, tokens=tuple(self.tokens), lex_error=self.lex_error)


# ---------------------------------------------------------------------------
# Python
# ---------------------------------------------------------------------------

def _py_quote_at(text: str, pos: int) -> str:
    if text.startswith(("'''", '"""'), pos):
        return text[pos:pos + 3]
    return text[pos]


def lex_python(content: bytes, file: str = "") -> TokenStream:
    scanner = _Scanner(content)
    text = scanner.text

    while scanner.pos < scanner.n:
        pos = scanner.pos
        ch = text[pos]

        if ch in _WHITESPACE or ch == "\\":
            scanner.pos += 1
            continue
        if ch == "#":
            scanner.skip_line()
            continue

        word = _PY_IDENTIFIER.match(text, pos)
        if word:
            end = word.end()
            if end < scanner.n and text[end] in "'\"" and word.group().lower() in _PY_STRING_PREFIXES:
                quote = _py_quote_at(text, end)
                scanner.scan_string(pos, end + len(quote), quote)
            else:
                scanner.emit(TokenKind.IDENTIFIER, word.group(), pos)
                scanner.pos = end
            continue

        if ch in "'\"":
            quote = _py_quote_at(text, pos)
            scanner.scan_string(pos, pos + len(quote), quote)
            continue

        number = _PY_NUMBER.match(text, pos)
        if number:
            scanner.pos = number.end()
            continue

        if not scanner.scan_operator(_PY_OPERATORS):
            scanner.pos += 1

    return scanner.stream(file, Language.PY)


# ---------------------------------------------------------------------------
# JavaScript
# ---------------------------------------------------------------------------

def _regex_allowed(prev: tuple[object, str] | None) -> bool:
    if prev is None:
        return True
    kind, text = prev
    if kind is TokenKind.OPERATOR:
        return True
    return kind is TokenKind.PUNCTUATION and text in _JS_REGEX_PRECEDERS


def _scan_js_regex(text: str, start: int) -> int | None:
    """End index of a regex literal starting at `start`, or None when it is not one."""
    n = len(text)
    i = start + 1
    in_class = False
    while i < n:
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c in "\r\n":
            return None
        if in_class:
            in_class = c != "]"
        elif c == "[":
            in_class = True
        elif c == "/":
            i += 1
            while i < n and (text[i].isalnum() or text[i] in "_$"):
                i += 1
            return i
        i += 1
    return None


def lex_javascript(content: bytes, file: str = "") -> TokenStream:
    scanner = _Scanner(content)
    text = scanner.text

    if text.startswith("#!"):
        scanner.skip_line()

    while scanner.pos < scanner.n:
        pos = scanner.pos
        ch = text[pos]

        if ch in _WHITESPACE:
            scanner.pos += 1
            continue
        if text.startswith("//", pos):
            scanner.skip_line()
            continue
        if text.startswith("/*", pos):
            end = text.find("*/", pos + 2)
            if end < 0:
                scanner.pos = scanner.n
                scanner.lex_error = True
            else:
                scanner.pos = end + 2
            continue

        word = _JS_IDENTIFIER.match(text, pos)
        if word:
            scanner.emit(TokenKind.IDENTIFIER, word.group(), pos)
            scanner.pos = word.end()
            continue

        if ch in "'\"`":
            scanner.scan_string(pos, pos + 1, ch)
            continue

        number = _JS_NUMBER.match(text, pos)
        if number:
            scanner.pos = number.end()
            scanner.prev = (_NUMBER, number.group())
            continue

        if ch == "/" and _regex_allowed(scanner.prev):
            end = _scan_js_regex(text, pos)
            if end is not None:
                scanner.pos = end
                scanner.prev = (_REGEX, text[pos:end])
                continue

        if not scanner.scan_operator(_JS_OPERATORS):
            scanner.pos += 1

    return scanner.stream(file, Language.JS)


# ---------------------------------------------------------------------------
# package.json
# ---------------------------------------------------------------------------

def lex_package_json(content: bytes, file: str = "package.json") -> TokenStream:
    """
    Tokenize a package.json document.

    Keys and string values become string tokens, structural characters
    punctuation. Malformed JSON is re-lexed as JavaScript with lex_error set.
    """
    scanner = _Scanner(content)
    text = scanner.text
    if not text.strip():
        return scanner.stream(file, Language.JS)

    try:
        json.loads(text)
    except ValueError:
        return replace(lex_javascript(content, file), lex_error=True)

    while scanner.pos < scanner.n:
        pos = scanner.pos
        ch = text[pos]
        if ch in _WHITESPACE:
            scanner.pos += 1
        elif ch == '"':
            scanner.scan_string(pos, pos + 1, '"')
        elif ch in _JSON_PUNCTUATION:
            scanner.emit(TokenKind.PUNCTUATION, ch, pos)
            scanner.pos += 1
        elif _JSON_NUMBER.match(text, pos):
            scanner.pos = _JSON_NUMBER.match(text, pos).end()
        elif _JSON_WORD.match(text, pos):
            word = _JSON_WORD.match(text, pos)
            scanner.emit(TokenKind.IDENTIFIER, word.group(), pos)
            scanner.pos = word.end()
        elif not scanner.scan_operator(_JS_OPERATORS):
            scanner.pos += 1

    return scanner.stream(file, Language.JS)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def lex_file(package_file: PackageFile) -> TokenStream | None:
    """Dispatch a classified file to its lexer; None for files that are not lexed."""
    role = package_file.role
    if role is FileRole.INSTALL_SCRIPT:
        if package_file.basename.lower() == "package.json":
            return lex_package_json(package_file.content, package_file.rel_path)
        return lex_python(package_file.content, package_file.rel_path)
    if role is FileRole.SOURCE_JS:
        return lex_javascript(package_file.content, package_file.rel_path)
    if role is FileRole.SOURCE_PY:
        return lex_python(package_file.content, package_file.rel_path)
    return None


def lex_artifact(artifact: PackageArtifact) -> dict[str, TokenStream]:
    """TokenStreams for every source file and install script, keyed by rel_path."""
    streams = {}
    for package_file in artifact.files:
        stream = lex_file(package_file)
        if stream is not None:
            streams[package_file.rel_path] = stream
    return streams
