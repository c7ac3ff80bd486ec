"""Workflow description formats: the script grammar and the JSONL record files.

A workflow script is a sequence of single-assignment agent calls::

    # comments run to the end of the line
    x1 = agent("Custom", instruction="analyze the question")(task)
    x2 = agent("Review", instruction="check the answer")(x1, task)

Every variable an argument list consumes becomes an edge from the statement
that bound it; ``task`` is the workflow input and creates no edge.
"""

import ast
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError

from workflow_predictor.errors import (
    DataIoError,
    FormatError,
    ScriptSyntaxError,
    UnboundVariable,
)
from workflow_predictor.graph_core import (
    AgentNode,
    TaskInstance,
    WorkflowGraph,
    in_neighbors,
    topo_order,
    validate,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TASK_VAR = "task"
AGENT_KEYWORD = "agent"
INSTRUCTION_KEYWORD = "instruction"

# Order matters: strings and comments must win over bare punctuation.
TOKEN_PATTERNS = [
    ("COMMENT", r"#[^\r\n]*"),
    ("STRING", r'"(?:\\.|[^"\\\r\n])*"|\'(?:\\.|[^\'\\\r\n])*\''),
    ("NAME", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("ASSIGN", r"="),
    ("LPAREN", r"\("),
    ("RPAREN", r"\)"),
    ("COMMA", r","),
    ("SEMI", r";"),
    ("NEWLINE", r"\r?\n"),
    ("SPACE", r"[ \t\f]+"),
]
TOKEN_RE = re.compile("|".join(f"(?P<{name}>{pattern})" for name, pattern in TOKEN_PATTERNS))
SKIPPED = {"COMMENT", "NEWLINE", "SPACE", "SEMI"}


class Token(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    value: str
    line: int
    column: int


class ScriptStatement(BaseModel):
    """``var = agent(name, instruction=text)(args...)``"""

    model_config = ConfigDict(frozen=True)

    var: str
    agent: str
    instruction: str
    args: Tuple[str, ...]
    line: int


class WorkflowScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    statements: Tuple[ScriptStatement, ...]


def tokenize(text: str) -> List[Token]:
    """Split script text into significant tokens.

    Raises:
        ScriptSyntaxError: On a character no token pattern accepts
    """
    tokens: List[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        match = TOKEN_RE.match(text, pos)
        if match is None:
            raise ScriptSyntaxError(line, pos - line_start + 1, f"unexpected character {text[pos]!r}")
        kind = match.lastgroup
        if kind not in SKIPPED:
            tokens.append(Token(kind=kind, value=match.group(), line=line, column=pos - line_start + 1))
        if kind == "NEWLINE":
            line += 1
            line_start = match.end()
        pos = match.end()
    return tokens


class _Parser:
    """Recursive-descent parser over the token list."""

    def __init__(self, tokens: List[Token], text: str):
        self.tokens = tokens
        self.pos = 0
        lines = text.splitlines() or [""]
        self.eof_line = len(lines)
        self.eof_column = len(lines[-1]) + 1

    def _peek(self) -> Optional[Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _expect(self, kind: str, value: Optional[str] = None) -> Token:
        token = self._peek()
        wanted = value if value is not None else kind
        if token is None:
            raise ScriptSyntaxError(self.eof_line, self.eof_column, f"expected {wanted}, found end of input")
        if token.kind != kind or (value is not None and token.value != value):
            raise ScriptSyntaxError(token.line, token.column, f"expected {wanted}, found {token.value!r}")
        self.pos += 1
        return token

    def _string(self) -> str:
        token = self._expect("STRING")
        return ast.literal_eval(token.value)

    def parse(self) -> List[ScriptStatement]:
        statements = []
        while self._peek() is not None:
            statements.append(self._statement())
        return statements

    def _statement(self) -> ScriptStatement:
        target = self._expect("NAME")
        self._expect("ASSIGN")
        self._expect("NAME", AGENT_KEYWORD)
        self._expect("LPAREN")
        name = self._string()
        self._expect("COMMA")
        self._expect("NAME", INSTRUCTION_KEYWORD)
        self._expect("ASSIGN")
        instruction = self._string()
        self._expect("RPAREN")
        self._expect("LPAREN")
        args: List[str] = []
        token = self._peek()
        if token is not None and token.kind != "RPAREN":
            args.append(self._expect("NAME").value)
            while self._peek() is not None and self._peek().kind == "COMMA":
                self.pos += 1
                args.append(self._expect("NAME").value)
        self._expect("RPAREN")
        if not name.strip():
            raise ScriptSyntaxError(target.line, target.column, "agent name must be non-empty")
        return ScriptStatement(
            var=target.value, agent=name, instruction=instruction, args=tuple(args), line=target.line
        )


def parse_script(text: str) -> WorkflowScript:
    """Parse workflow script text.

    Args:
        text: Script source

    Returns:
        The parsed script, every variable bound before use

    Raises:
        ScriptSyntaxError: On malformed input, including an empty script
        UnboundVariable: When an argument names a variable not yet bound
    """
    statements = _Parser(tokenize(text), text).parse()
    if not statements:
        raise ScriptSyntaxError(1, 1, "script contains no statements")

    bound = set()
    for statement in statements:
        for arg in statement.args:
            if arg != TASK_VAR and arg not in bound:
                raise UnboundVariable(arg, statement.line)
        if statement.var == TASK_VAR or statement.var in bound:
            raise ScriptSyntaxError(statement.line, 1, f"variable {statement.var!r} cannot be re-bound")
        bound.add(statement.var)
    return WorkflowScript(statements=tuple(statements))


def extract_graph(script: WorkflowScript, graph_id: str = "") -> WorkflowGraph:
    """Recover the workflow graph from variable propagation.

    Node ``i`` (1-based) is statement ``i``; its prompt is the agent name
    joined with the instruction. An edge ``i -> j`` exists when statement
    ``j`` consumes the variable statement ``i`` bound.
    """
    binding: Dict[str, int] = {}
    nodes: List[AgentNode] = []
    edges: List[Tuple[int, int]] = []
    for node_id, statement in enumerate(script.statements, start=1):
        nodes.append(AgentNode(id=node_id, prompt=f"{statement.agent}: {statement.instruction}"))
        for arg in dict.fromkeys(statement.args):
            if arg == TASK_VAR:
                continue
            edges.append((binding[arg], node_id))
        binding[statement.var] = node_id
    return WorkflowGraph(id=graph_id, nodes=tuple(nodes), edges=tuple(edges))


def _quote(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def graph_to_script(graph: WorkflowGraph) -> str:
    """Render a valid graph in script form, one statement per node in topological order."""
    lines = []
    for node_id in topo_order(graph):
        prompt = graph.prompt_of(node_id)
        name, sep, instruction = prompt.partition(": ")
        if not sep:
            name, instruction = "Agent", prompt
        preds = sorted(in_neighbors(graph, node_id))
        args = ", ".join(f"x{p}" for p in preds) if preds else TASK_VAR
        lines.append(f"x{node_id} = agent({_quote(name)}, instruction={_quote(instruction)})({args})")
    return "\n".join(lines) + "\n"


def graph_to_record(graph: WorkflowGraph) -> Dict[str, Any]:
    return {
        "id": graph.id,
        "nodes": [{"id": node.id, "prompt": node.prompt} for node in graph.nodes],
        "edges": [[src, dst] for src, dst in graph.edges],
    }


def task_to_record(task: TaskInstance) -> Dict[str, Any]:
    return {"id": task.id, "text": task.text, "domain": task.domain, "eval": task.eval_spec}


def _edge_from(value: Any) -> Tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"edge {value!r} is not a [src, dst] pair")
    if not all(isinstance(end, int) and not isinstance(end, bool) for end in value):
        raise ValueError(f"edge {value!r} has non-integer endpoints")
    return value[0], value[1]


def graph_from_record(record: Dict[str, Any]) -> WorkflowGraph:
    return WorkflowGraph(
        id=str(record.get("id", "")),
        nodes=tuple(AgentNode(id=n["id"], prompt=n["prompt"]) for n in record["nodes"]),
        edges=tuple(_edge_from(e) for e in record.get("edges", [])),
    )


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_number, record)`` for every non-blank line.

    Raises:
        DataIoError: If the file cannot be opened
        FormatError: If a line is not UTF-8 or not a JSON object
    """
    try:
        handle = open(path, "rb")
    except OSError as e:
        raise DataIoError(f"cannot read {path}: {e}") from e
    with handle:
        for number, raw_bytes in enumerate(handle, start=1):
            try:
                raw = raw_bytes.decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(number, f"invalid UTF-8 at byte {e.start}") from e
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise FormatError(number, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise FormatError(number, "record is not a JSON object")
            yield number, record


def write_jsonl(path: PathLike, records: Sequence[Dict[str, Any]]) -> None:
    """Write records one per line with a stable byte layout."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for record in records:
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    except OSError as e:
        raise DataIoError(f"cannot write {path}: {e}") from e


def load_graphs(path: PathLike) -> List[WorkflowGraph]:
    """Load and validate a graph JSONL file.

    Raises:
        DataIoError: If the file cannot be read
        FormatError: With the offending line number on any malformed or invalid record
    """
    graphs = []
    for number, record in iter_jsonl(path):
        try:
            graph = graph_from_record(record)
        except (KeyError, TypeError, ValueError, IndexError, ValidationError) as e:
            raise FormatError(number, f"malformed graph record: {e}") from e
        report = validate(graph)
        if not report.ok:
            raise FormatError(number, "; ".join(report.violations))
        graphs.append(graph)
    logger.info(f"Loaded {len(graphs)} graphs from {path}")
    return graphs


def load_tasks(path: PathLike) -> List[TaskInstance]:
    """Load a task JSONL file; task ids must be unique.

    A synthetic-domain task with an ``eval`` descriptor must carry a well-formed one;
    label-only datasets may leave it empty.

    Raises:
        DataIoError: If the file cannot be read
        FormatError: With the offending line number on any malformed record
    """
    # sim_executor imports text_encode, which imports this module
    from workflow_predictor.sim_executor import SyntheticEvalSpec

    tasks = []
    seen = set()
    for number, record in iter_jsonl(path):
        try:
            task = TaskInstance.model_validate(record)
        except ValidationError as e:
            raise FormatError(number, f"malformed task record: {e.errors()[0]['msg']}") from e
        if task.domain == "synthetic" and task.eval_spec:
            try:
                SyntheticEvalSpec.model_validate(task.eval_spec)
            except ValidationError as e:
                raise FormatError(number, f"malformed eval descriptor: {e.errors()[0]['msg']}") from e
        if task.id in seen:
            raise FormatError(number, f"duplicate task id {task.id!r}")
        seen.add(task.id)
        tasks.append(task)
    logger.info(f"Loaded {len(tasks)} tasks from {path}")
    return tasks


def dump_graphs(path: PathLike, graphs: Sequence[WorkflowGraph]) -> None:
    write_jsonl(path, [graph_to_record(g) for g in graphs])


def dump_tasks(path: PathLike, tasks: Sequence[TaskInstance]) -> None:
    write_jsonl(path, [task_to_record(t) for t in tasks])


def load_script(path: PathLike, graph_id: Optional[str] = None) -> WorkflowGraph:
    """Parse a script file and extract its graph; the id defaults to the file stem."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataIoError(f"cannot read {path}: {e}") from e
    return extract_graph(parse_script(text), graph_id if graph_id is not None else Path(path).stem)
