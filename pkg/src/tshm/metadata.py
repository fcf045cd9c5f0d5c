"""The on-disk session descriptor: line-oriented UTF-8 key=value text.

Global keys come first, then one `[partition k]` block per partition. Arrays
are comma-separated, lines end with LF, keys are ASCII. The format is
deliberately parseable from any language without libraries; the C-side
consumer reads the same file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MetadataError

METADATA_VERSION = 1


@dataclass
class PartitionMeta:
    index: int
    coords_region: str
    values_region: str
    box_lower: tuple[int, ...]
    box_upper: tuple[int, ...]
    count: int
    capacity: int


@dataclass
class SessionMetadata:
    session: str
    dims: tuple[int, ...]
    nnz: int
    flag_region: str
    result_region: str
    backing_dir: str
    partitions: list[PartitionMeta] = field(default_factory=list)
    version: int = METADATA_VERSION
    index_width_bits: int = 64
    value_width_bits: int = 64
    endianness: str = "LE"
    index_base: int = 0

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def P(self) -> int:
        return len(self.partitions)


def serialize(md: SessionMetadata) -> str:
    lines = [
        f"version={md.version}",
        f"session={md.session}",
        f"d={md.d}",
        f"dims={_ints(md.dims)}",
        f"nnz={md.nnz}",
        f"P={md.P}",
        f"index_width_bits={md.index_width_bits}",
        f"value_width_bits={md.value_width_bits}",
        f"endianness={md.endianness}",
        f"index_base={md.index_base}",
        f"backing_dir={md.backing_dir}",
        f"flag_region={md.flag_region}",
        f"result_region={md.result_region}",
    ]
    for p in md.partitions:
        lines.append(f"[partition {p.index}]")
        lines.append(f"coords_region={p.coords_region}")
        lines.append(f"values_region={p.values_region}")
        lines.append(f"box_lower={_ints(p.box_lower)}")
        lines.append(f"box_upper={_ints(p.box_upper)}")
        lines.append(f"count={p.count}")
        lines.append(f"capacity={p.capacity}")
    return "\n".join(lines) + "\n"


def _ints(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def write_file(md: SessionMetadata, path: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(serialize(md))


def parse(text: str) -> SessionMetadata:
    globals_: dict[str, str] = {}
    blocks: dict[int, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not (line.startswith("[partition ") and line.endswith("]")):
                raise MetadataError(f"line {lineno}: bad section header {line!r}")
            try:
                k = int(line[len("[partition "):-1])
            except ValueError:
                raise MetadataError(f"line {lineno}: bad partition index") from None
            if k in blocks:
                raise MetadataError(f"line {lineno}: duplicate partition {k}")
            current = blocks[k] = {}
            continue
        if "=" not in line:
            raise MetadataError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        target = globals_ if current is None else current
        target[key.strip()] = value.strip()

    def need(d: dict[str, str], key: str, where: str) -> str:
        if key not in d:
            raise MetadataError(f"missing key {key!r} in {where}")
        return d[key]

    def ints(s: str) -> tuple[int, ...]:
        try:
            return tuple(int(x) for x in s.split(",")) if s else ()
        except ValueError:
            raise MetadataError(f"bad integer list {s!r}") from None

    try:
        version = int(need(globals_, "version", "header"))
        d = int(need(globals_, "d", "header"))
        dims = ints(need(globals_, "dims", "header"))
        nnz = int(need(globals_, "nnz", "header"))
        P = int(need(globals_, "P", "header"))
        index_width = int(need(globals_, "index_width_bits", "header"))
        value_width = int(need(globals_, "value_width_bits", "header"))
        index_base = int(need(globals_, "index_base", "header"))
    except ValueError:
        raise MetadataError("non-integer header field") from None

    if version != METADATA_VERSION:
        raise MetadataError(f"unsupported metadata version {version}")
    if len(dims) != d:
        raise MetadataError(f"dims has {len(dims)} entries, d={d}")
    if set(blocks) != set(range(P)):
        raise MetadataError(
            f"expected partitions 0..{P - 1}, found {sorted(blocks)}"
        )

    partitions = []
    for k in range(P):
        b = blocks[k]
        where = f"partition {k}"
        lower = ints(need(b, "box_lower", where))
        upper = ints(need(b, "box_upper", where))
        if len(lower) != d or len(upper) != d:
            raise MetadataError(f"{where}: box rank != {d}")
        try:
            count = int(need(b, "count", where))
            capacity = int(need(b, "capacity", where))
        except ValueError:
            raise MetadataError(f"{where}: non-integer count/capacity") from None
        partitions.append(PartitionMeta(
            index=k,
            coords_region=need(b, "coords_region", where),
            values_region=need(b, "values_region", where),
            box_lower=lower,
            box_upper=upper,
            count=count,
            capacity=capacity,
        ))

    return SessionMetadata(
        session=need(globals_, "session", "header"),
        dims=dims,
        nnz=nnz,
        flag_region=need(globals_, "flag_region", "header"),
        result_region=need(globals_, "result_region", "header"),
        backing_dir=need(globals_, "backing_dir", "header"),
        partitions=partitions,
        version=version,
        index_width_bits=index_width,
        value_width_bits=value_width,
        endianness=need(globals_, "endianness", "header"),
        index_base=index_base,
    )


def read_file(path: str) -> SessionMetadata:
    try:
        with open(path, "r", encoding="ascii") as f:
            return parse(f.read())
    except FileNotFoundError:
        raise MetadataError(f"metadata file not found: {path}") from None
