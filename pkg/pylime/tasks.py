# -*- coding: utf-8 -*-
'''
Tasks submodule: synthetic reasoning datasets.

Two generators are provided:
    - the Arithmetic Expression Task (AET): integer expressions over + - * /
      solved by a chain of single-reduction rewrites,
    - a ProsQA-style task: "Every X is a Y." rules over a DAG of pseudoword
      concepts, and a two-choice question about one entity.

Samples are stored as token ids of a closed, task-specific vocabulary. Each
prompt is [bos] + tokens + [sep]; each solution ends with eos.
'''

import re
import logging
from dataclasses import dataclass, field
from collections import deque
from fractions import Fraction
from .tensor import make_stream
from .exceptions import GenerationError, VocabularyError, DatasetError

__all__ = [
    "SyntheticSample", "TaskVocab", "task_vocab", "build_vocab",
    "gen_arithmetic", "gen_prosqa", "extract_answer",
    "parse_items", "render_items", "reduce_once", "reduction_steps", "evaluate_expression",
    "parse_prosqa_prompt", "reachable_concepts",
]

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
PAD, BOS, EOS, SEP = range(4)

AET_SYMBOLS = list("0123456789+-*/()=")
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}
_GLYPHS = {"×": "*", "÷": "/", "−": "-", "–": "-"}

PROSQA_ONSETS = ["b", "br", "d", "f", "g", "gr", "j", "l", "m", "n", "p", "r", "sh", "sc", "st", "t", "tr", "v", "w", "y", "z"]
PROSQA_VOWELS = ["a", "e", "i", "o", "u", "oo"]
PROSQA_CODAS = ["m", "r", "l"]
PROSQA_ENTITIES = ["Tom", "Alex", "Davis", "Sally", "Max", "Jack", "Rex", "Wren", "Stella", "Polly", "Fae", "Sam"]
PROSQA_WORDS = ["Question", "Steps", "Answer", "Every", "Is", "is", "a", "or", ".", "?", ":"]


@dataclass
class SyntheticSample:
    '''
    Prompt / solution / answer triple.

    Attributes:
        prompt (list[int]): [bos] + question tokens + [sep]
        solution (list[int]): step-by-step continuation ending with eos
        answer (str): canonical answer
        meta (dict): generator parameters (task, size, seed, index)
    '''
    prompt: list
    solution: list
    answer: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "solution": list(self.solution), "answer": self.answer, "meta": dict(self.meta)}

    @classmethod
    def from_dict(cls, values:dict) -> 'SyntheticSample':
        try:
            return cls([int(i) for i in values["prompt"]], [int(i) for i in values["solution"]], str(values["answer"]), dict(values.get("meta", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError("Malformed sample: {}".format(e))

    def __len__(self) -> int:
        return len(self.prompt) + len(self.solution)


class TaskVocab(object):
    '''
    Bijective token/id mapping with dense ids; ids 0..3 are pad, bos, eos, sep.

    Attributes:
        kind (str): "aet", "prosqa" or "bytes"
        tokens (list[str]): token of every id
    '''

    def __init__(self, kind:str, tokens:'list[str]'):
        '''
        Constructor.

        Args:
            kind (str): tokenizer kind
            tokens (list[str]): non-special tokens, in id order

        Raises:
            ValueError: if the kind is unknown or tokens repeat.
        '''
        if kind not in ("aet", "prosqa", "bytes"):
            raise ValueError("Unknown vocabulary kind '{}'.".format(kind))
        self.kind = kind
        self.tokens = list(SPECIALS) + list(tokens)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("Vocabulary tokens must be unique.")

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    sep_id = SEP

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def tokenize(self, text:str) -> 'list[str]':
        '''
        Split text into tokens of this vocabulary's kind.
        '''
        if self.kind == "aet":
            for glyph, ascii in _GLYPHS.items():
                text = text.replace(glyph, ascii)
            return [c for c in text if not c.isspace()]
        if self.kind == "prosqa":
            return re.findall(r"\w+|[^\w\s]", text)
        return ["<0x{:02X}>".format(b) for b in text.encode("utf-8")]

    def detokenize(self, tokens:'list[str]') -> str:
        if self.kind == "aet":
            return "".join(tokens)
        if self.kind == "prosqa":
            return re.sub(r" ([.?:])", r"\1", " ".join(tokens))
        return bytes(int(tok[3:5], 16) for tok in tokens).decode("utf-8", errors="replace")

    def encode(self, text:str) -> 'list[int]':
        '''
        Encode text (without specials).

        Raises:
            VocabularyError: if a token is unknown.
        '''
        try:
            return [self.ids[tok] for tok in self.tokenize(text)]
        except KeyError as e:
            raise VocabularyError("Token {} is not in the {} vocabulary.".format(e, self.kind))

    def decode(self, ids, skip_special:bool=True) -> str:
        '''
        Decode ids, stopping at the first eos; specials are dropped.
        '''
        tokens = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.tokens):
                raise VocabularyError("Id {} outside [0, {}).".format(i, len(self.tokens)))
            if i == EOS:
                break
            if i < len(SPECIALS):
                if not skip_special:
                    tokens.append(self.tokens[i])
                continue
            tokens.append(self.tokens[i])
        return self.detokenize(tokens)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tokens": self.tokens}

    @classmethod
    def from_dict(cls, values:dict) -> 'TaskVocab':
        tokens = list(values["tokens"])
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise DatasetError("Vocabulary does not start with the special tokens.")
        return cls(values["kind"], tokens[len(SPECIALS):])


def _prosqa_concepts() -> 'list[str]':
    return [onset + vowel + coda + "pus" for onset in PROSQA_ONSETS for vowel in PROSQA_VOWELS for coda in PROSQA_CODAS]


def task_vocab(kind:str) -> TaskVocab:
    '''
    Closed vocabulary of a task kind ("aet", "prosqa", or "bytes" / "corpus").
    '''
    if kind == "aet":
        return TaskVocab("aet", AET_SYMBOLS)
    if kind == "prosqa":
        return TaskVocab("prosqa", PROSQA_WORDS + PROSQA_ENTITIES + _prosqa_concepts())
    if kind in ("bytes", "corpus"):
        return TaskVocab("bytes", ["<0x{:02X}>".format(b) for b in range(256)])
    raise ValueError("Unknown task kind '{}'.".format(kind))


def build_vocab(source) -> TaskVocab:
    '''
    Vocabulary for a list of samples or for corpus mode.

    Args:
        source (list[SyntheticSample] or str): samples (kind read from meta["task"]),
            or "corpus" for the byte-level vocabulary

    Returns:
        TaskVocab: vocabulary

    Raises:
        DatasetError: if the input is empty or mixes tasks.
    '''
    if isinstance(source, str):
        return task_vocab(source)
    samples = list(source)
    if not samples:
        raise DatasetError("Cannot build a vocabulary from an empty sample list.")
    kinds = {s.meta.get("task") for s in samples}
    if len(kinds) != 1:
        raise DatasetError("Samples mix task kinds: {}.".format(sorted(map(str, kinds))))
    return task_vocab(kinds.pop())


# ---------------------------------------------------------------- arithmetic

def parse_items(text:str) -> list:
    '''
    Split an expression into integers, operators and parentheses.

    A parenthesized negative literal "(-5)" becomes the integer -5.

    Args:
        text (str): expression; accepts x, / and their typographic forms

    Returns:
        list: items (int or one of "+-*/()")
    '''
    for glyph, ascii in _GLYPHS.items():
        text = text.replace(glyph, ascii)
    text = text.replace(" ", "")
    items = []
    i = 0
    while i < len(text):
        c = text[i]
        literal = re.match(r"\(-(\d+)\)", text[i:])
        if literal:
            items.append(-int(literal.group(1)))
            i += literal.end()
        elif c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            items.append(int(text[i:j]))
            i = j
        elif c in "+-*/()":
            items.append(c)
            i += 1
        else:
            raise ValueError("Unexpected character '{}' in expression.".format(c))
    return items


def render_items(items:list) -> str:
    '''
    Render items back to text; negative integers are written "(-n)".
    '''
    out = []
    for item in items:
        if isinstance(item, int):
            out.append(str(item) if item >= 0 else "(-{})".format(-item))
        else:
            out.append(item)
    return "".join(out)


def _apply(op:str, a:int, b:int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0 or a % b:
        raise ArithmeticError("inexact division {}/{}".format(a, b))
    return a // b


def reduce_once(items:list) -> list:
    '''
    Perform one reduction.

    The leftmost innermost parenthesized group is worked on first (the whole
    expression when there is none). Inside it, the leftmost operator that may be
    evaluated without breaking precedence or left associativity is applied. A
    group reduced to one number loses its parentheses in the same step.

    Args:
        items (list): expression items

    Returns:
        list: reduced items

    Raises:
        ArithmeticError: on division by zero or an inexact division.
        ValueError: if the expression is already a single number.
    '''
    if len(items) == 1:
        raise ValueError("Expression is already reduced.")
    if ")" in items:
        close = items.index(")")
        open_ = max(i for i in range(close) if items[i] == "(")
        start, stop = open_ + 1, close
    else:
        open_ = close = None
        start, stop = 0, len(items)
    group = items[start:stop]
    ops = list(range(1, len(group), 2))
    for k in ops:
        left = group[k - 2] if k - 2 >= 0 else None
        right = group[k + 2] if k + 2 < len(group) else None
        prec = _PRECEDENCE[group[k]]
        if (left is None or _PRECEDENCE[left] < prec) and (right is None or _PRECEDENCE[right] <= prec):
            value = _apply(group[k], group[k - 1], group[k + 1])
            group = group[:k - 1] + [value] + group[k + 2:]
            break
    if open_ is not None and len(group) == 1:
        return items[:open_] + group + items[close + 1:]
    return items[:start] + group + items[stop:]


def reduction_steps(items:list) -> 'list[list]':
    '''
    All intermediate expressions down to a single integer (the input excluded).
    '''
    steps = []
    while len(items) > 1:
        items = reduce_once(items)
        steps.append(items)
    return steps


class _Parser(object):
    '''
    Recursive-descent evaluator over exact rationals, used as an independent check.
    '''
    def __init__(self, text:str):
        for glyph, ascii in _GLYPHS.items():
            text = text.replace(glyph, ascii)
        self.tokens = re.findall(r"\d+|[-+*/()]", text.replace(" ", ""))
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek() in ("+", "-"):
            value = value + self.term() if self.next() == "+" else value - self.term()
        return value

    def term(self) -> Fraction:
        value = self.factor()
        while self.peek() in ("*", "/"):
            if self.next() == "*":
                value = value * self.factor()
            else:
                value = value / self.factor()
        return value

    def factor(self) -> Fraction:
        tok = self.next()
        if tok == "-":
            return -self.factor()
        if tok == "(":
            value = self.expr()
            if self.next() != ")":
                raise ValueError("Unbalanced parentheses.")
            return value
        if tok is None or not tok.isdigit():
            raise ValueError("Unexpected token {!r}.".format(tok))
        return Fraction(int(tok))


def evaluate_expression(text:str) -> Fraction:
    '''
    Evaluate an expression with standard precedence, exactly.

    Raises:
        ValueError: if the expression is malformed.
        ZeroDivisionError: on division by zero.
    '''
    parser = _Parser(text)
    value = parser.expr()
    if parser.peek() is not None:
        raise ValueError("Trailing tokens in expression.")
    return value


def _random_tree(rng, n:int, operators:str, low:int, high:int):
    if n == 1:
        return int(rng.integers(low, high + 1))
    k = int(rng.integers(1, n))
    op = operators[int(rng.integers(len(operators)))]
    return (op, _random_tree(rng, k, operators, low, high), _random_tree(rng, n - k, operators, low, high))


def _tree_items(node, parent:str|None=None, right:bool=False) -> list:
    if isinstance(node, int):
        return [node]
    op, lhs, rhs = node
    inner = _tree_items(lhs, op, False) + [op] + _tree_items(rhs, op, True)
    if parent is not None:
        tighter = _PRECEDENCE[op] < _PRECEDENCE[parent]
        regroup = right and _PRECEDENCE[op] == _PRECEDENCE[parent] and parent in "-/"
        if tighter or regroup:
            return ["("] + inner + [")"]
    return inner


def gen_arithmetic(n_operands:int, count:int, seed:int, operators:str="+-*/", operand_range:'tuple[int, int]'=(1, 12), max_abs:int=999, max_attempts:int=100000) -> 'list[SyntheticSample]':
    '''
    Generate arithmetic expressions with step-by-step solutions.

    Expressions are random binary trees rendered with the parentheses that
    precedence requires. A draw is rejected unless every reduction step is exact
    and every intermediate value satisfies |v| <= max_abs.

    Args:
        n_operands (int): number of integer operands (the benchmark tiers use 4, 5, 6)
        count (int): number of samples
        seed (int): generator seed; sample i depends only on (parameters, seed, i)
        operators (str): operator alphabet
        operand_range (tuple[int, int]): inclusive operand bounds
        max_abs (int): bound on intermediate magnitudes
        max_attempts (int): rejection budget per sample

    Returns:
        list[SyntheticSample]: samples

    Raises:
        ValueError: if count or n_operands is invalid.
        GenerationError: if no valid expression is found within the budget.
    '''
    if count < 1:
        raise ValueError("Sample count must be at least 1.")
    if n_operands < 2:
        raise ValueError("Expressions need at least two operands.")
    if not operators or any(op not in _PRECEDENCE for op in operators):
        raise ValueError("Operators must be drawn from '+-*/'.")
    vocab = task_vocab("aet")
    low, high = operand_range
    samples = []
    rejected = 0
    for index in range(count):
        rng = make_stream(seed, "aet/{}/{}".format(n_operands, index))
        for _ in range(max_attempts):
            items = _tree_items(_random_tree(rng, n_operands, operators, low, high))
            try:
                steps = reduction_steps(items)
            except ArithmeticError:
                rejected += 1
                continue
            if any(abs(v) > max_abs for step in steps for v in step if isinstance(v, int)):
                rejected += 1
                continue
            break
        else:
            raise GenerationError("No valid {}-operand expression within {} attempts.".format(n_operands, max_attempts))
        question = render_items(items) + "="
        solution = "=".join(render_items(step) for step in steps)
        answer = str(steps[-1][0])
        samples.append(SyntheticSample(
            prompt=[BOS] + vocab.encode(question) + [SEP],
            solution=vocab.encode(solution) + [EOS],
            answer=answer,
            meta={"task": "aet", "n_operands": n_operands, "seed": seed, "index": index, "steps": len(steps)},
        ))
    logging.debug("Generated %d AET samples (%d rejected draws)", count, rejected)
    return samples


# ---------------------------------------------------------------- prosqa

def reachable_concepts(edges:dict, starts) -> set:
    '''
    Concepts reachable from the start concepts (the starts included).
    '''
    seen = set(starts)
    queue = deque(starts)
    while queue:
        node = queue.popleft()
        for nxt in edges.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _shortest_path(edges:dict, starts:list, target:str) -> 'list[str]':
    parent = {s: None for s in starts}
    queue = deque(starts)
    while queue:
        node = queue.popleft()
        if node == target:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1]
        for nxt in sorted(edges.get(node, ())):
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    raise GenerationError("Target '{}' is unreachable.".format(target))


def _pick(rng, seq:list):
    return seq[int(rng.integers(len(seq)))]


def _prosqa_graph(rng, n_concepts:int, n_rules:int, depth:int, n_entities:int):
    concepts = list(rng.permutation(_prosqa_concepts())[:n_concepts])
    # concepts[i] -> concepts[j] only for i < j, which keeps the graph acyclic
    order = {c: i for i, c in enumerate(concepts)}
    picks = sorted(int(i) for i in rng.choice(n_concepts, size=2 * (depth + 1), replace=False))
    chain = [concepts[i] for i in picks[0::2]]
    decoy = [concepts[i] for i in picks[1::2]]
    edges = {}
    rules = []

    def add_edge(u, v):
        edges.setdefault(u, set()).add(v)
        rules.append((u, v))

    for path in (chain, decoy):
        for u, v in zip(path[:-1], path[1:]):
            add_edge(u, v)
    entities = [str(e) for e in rng.permutation(PROSQA_ENTITIES)[:n_entities]]
    facts = [(entities[0], chain[0])] + [(e, decoy[0]) for e in entities[1:2]]
    starts = [chain[0]]
    distractor = decoy[-1]
    # an extra fact about the queried entity, off the chain and unable to reach the distractor
    candidates = [c for c in concepts if c not in chain and distractor not in reachable_concepts(edges, [c])]
    if candidates:
        extra = _pick(rng, candidates)
        facts.append((entities[0], extra))
        starts.append(extra)
    for e in entities[2:]:
        facts.append((e, _pick(rng, concepts)))
    attempts = 0
    while len(rules) < n_rules:
        attempts += 1
        if attempts > 200 * n_rules:
            raise GenerationError("Cannot place {} rules over {} concepts.".format(n_rules, n_concepts))
        i, j = sorted(int(x) for x in rng.choice(n_concepts, size=2, replace=False))
        u, v = concepts[i], concepts[j]
        if v in edges.get(u, ()):
            continue
        edges.setdefault(u, set()).add(v)
        if distractor in reachable_concepts(edges, starts):
            edges[u].discard(v)
            continue
        rules.append((u, v))
    return concepts, edges, rules, facts, entities[0], starts, chain[-1], distractor, order


def gen_prosqa(count:int, seed:int, n_concepts:int=20, n_rules:int=23, depth:int=3, n_entities:int=3) -> 'list[SyntheticSample]':
    '''
    Generate ProsQA-style two-choice questions over a random concept DAG.

    Each sample shuffles "Every X is a Y." rules with entity facts, then asks
    "Is E a T or D?". T is reachable from the entity's concepts, D is not. The
    solution follows the shortest rule chain from a fact about E to T.

    Args:
        count (int): number of samples
        seed (int): generator seed; sample i depends only on (parameters, seed, i)
        n_concepts (int): concepts per graph
        n_rules (int): rules per graph
        depth (int): rule hops between the entity's concept and the answer
        n_entities (int): named entities mentioned (the queried one included)

    Returns:
        list[SyntheticSample]: samples

    Raises:
        GenerationError: if the parameters cannot be satisfied.
    '''
    if count < 1:
        raise ValueError("Sample count must be at least 1.")
    if depth < 1:
        raise GenerationError("Depth must be at least 1.")
    if n_concepts < 2 * (depth + 1):
        raise GenerationError("{} concepts cannot hold two disjoint chains of depth {}.".format(n_concepts, depth))
    if n_rules < 2 * depth:
        raise GenerationError("{} rules cannot hold two chains of depth {}.".format(n_rules, depth))
    if not 1 <= n_entities <= len(PROSQA_ENTITIES):
        raise GenerationError("Entity count must be within [1, {}].".format(len(PROSQA_ENTITIES)))
    vocab = task_vocab("prosqa")
    samples = []
    for index in range(count):
        rng = make_stream(seed, "prosqa/{}".format(index))
        _, edges, rules, facts, entity, starts, target, distractor, _ = _prosqa_graph(rng, n_concepts, n_rules, depth, n_entities)
        sentences = ["Every {} is a {}.".format(u, v) for u, v in rules] + ["{} is a {}.".format(e, c) for e, c in facts]
        sentences = [sentences[int(i)] for i in rng.permutation(len(sentences))]
        choices = [target, distractor] if rng.integers(2) == 0 else [distractor, target]
        question = "Question: {} Is {} a {} or {}?".format(" ".join(sentences), entity, choices[0], choices[1])
        path = _shortest_path(edges, starts, target)
        steps = ["{} is a {}.".format(entity, path[0])] + ["Every {} is a {}.".format(u, v) for u, v in zip(path[:-1], path[1:])]
        answer = "{} is a {}.".format(entity, target)
        solution = "Steps: {} Answer: {}".format(" ".join(steps), answer)
        samples.append(SyntheticSample(
            prompt=[BOS] + vocab.encode(question) + [SEP],
            solution=vocab.encode(solution) + [EOS],
            answer=answer,
            meta={"task": "prosqa", "n_concepts": n_concepts, "n_rules": n_rules, "depth": depth,
                  "hops": len(path) - 1, "seed": seed, "index": index},
        ))
    logging.debug("Generated %d ProsQA samples", count)
    return samples


def parse_prosqa_prompt(text:str) -> 'tuple[dict, dict, str, list[str]]':
    '''
    Recover the graph of a ProsQA question.

    Returns:
        tuple: rule edges {X: {Y}}, entity facts {E: {X}}, queried entity, the two choices
    '''
    edges, facts = {}, {}
    for u, v in re.findall(r"Every (\w+) is a (\w+)\.", text):
        edges.setdefault(u, set()).add(v)
    for e, c in re.findall(r"(?<!Every )\b([A-Z]\w*) is a (\w+)\.", text):
        if e != "Every":
            facts.setdefault(e, set()).add(c)
    question = re.search(r"Is (\w+) a (\w+) or (\w+)\?", text)
    if question is None:
        raise ValueError("No question found.")
    return edges, facts, question.group(1), [question.group(2), question.group(3)]


# ---------------------------------------------------------------- scoring

def extract_answer(ids, kind:str, vocab:TaskVocab|None=None) -> str|None:
    '''
    Extract the final answer of a generated continuation.

    AET: the integer after the last "=" (the whole text when the continuation
    holds no "="), provided nothing else follows it. ProsQA: the last
    "E is a X." clause about a named entity. Decoding stops at eos.

    Args:
        ids (list[int]): generated ids
        kind (str): "aet" or "prosqa"
        vocab (TaskVocab or None): vocabulary; the task's closed one when None

    Returns:
        str or None: answer, or None when the pattern is absent
    '''
    vocab = vocab if vocab is not None else task_vocab(kind)
    try:
        text = vocab.decode(ids)
    except VocabularyError:
        return None
    if kind == "aet":
        tail = text.rsplit("=", 1)[-1]
        match = re.fullmatch(r"(-?\d+)|\(-(\d+)\)", tail)
        if match is None:
            return None
        return match.group(1) if match.group(1) is not None else "-" + match.group(2)
    if kind == "prosqa":
        clauses = [(e, c) for e, c in re.findall(r"\b([A-Z]\w*) is a (\w+)\.", text) if e != "Every"]
        if not clauses:
            return None
        return "{} is a {}.".format(*clauses[-1])
    raise ValueError("Unknown task kind '{}'.".format(kind))
