"""Random transform chains plus a plain-list interpreter used as the oracle."""

from __future__ import annotations

import random

INT_OPS = ["map", "filter", "flat_map", "union", "key_by"]
PAIR_OPS = ["map_values", "filter_pair", "reduce", "group", "join", "unkey"]


def random_chain(rng: random.Random, max_ops: int = 6) -> tuple[list[int], int, list[tuple]]:
    items = [rng.randint(-50, 50) for _ in range(rng.randint(0, 100))]
    n_parts = rng.randint(1, 6)
    ops: list[tuple] = []
    kind = "int"
    for _ in range(rng.randint(0, max_ops)):
        if kind == "int":
            op = rng.choice(INT_OPS)
        else:
            op = rng.choice(PAIR_OPS)
        a = rng.randint(1, 7)
        if op == "union":
            extra = [rng.randint(-50, 50) for _ in range(rng.randint(0, 20))]
            ops.append((op, extra, rng.randint(1, 4)))
        elif op == "join":
            other = [(rng.randint(0, a), rng.randint(-5, 5)) for _ in range(rng.randint(0, 15))]
            ops.append((op, other, rng.randint(1, 4)))
        else:
            ops.append((op, a))
        if op == "key_by":
            kind = "pair"
        elif op == "unkey":
            kind = "int"
    return items, n_parts, ops


def _fn(op: tuple):
    name = op[0]
    if name == "map":
        a = op[1]
        return lambda x: x * a + 1
    if name == "filter":
        a = op[1]
        return lambda x: x % a != 0
    if name == "flat_map":
        a = op[1]
        return lambda x: [x] * (abs(x) % a)
    if name == "key_by":
        a = op[1]
        return lambda x: (x % a, x)
    if name == "map_values":
        a = op[1]
        return lambda kv: (kv[0], kv[1] - a)
    if name == "filter_pair":
        a = op[1]
        return lambda kv: kv[1] % a != 1
    if name == "unkey":
        return lambda kv: kv[0] * 1000 + kv[1]
    raise KeyError(name)


def has_wide(ops: list[tuple]) -> bool:
    return any(op[0] in ("reduce", "group", "join") for op in ops)


def shuffle_dependency_count(ops: list[tuple]) -> int:
    # a join shuffles both of its inputs
    return sum({"reduce": 1, "group": 1, "join": 2}.get(op[0], 0) for op in ops)


def build(ctx, items, n_parts, ops):
    """Build the chain with the engine; returns every dataset created in order."""
    ds = ctx.parallelize(items, n_parts)
    created = [ds]
    for op in ops:
        name = op[0]
        if name in ("map", "key_by", "map_values", "unkey"):
            ds = ds.map(_fn(op))
        elif name in ("filter", "filter_pair"):
            ds = ds.filter(_fn(op))
        elif name == "flat_map":
            ds = ds.flat_map(_fn(op))
        elif name == "union":
            other = ctx.parallelize(op[1], op[2])
            created.append(other)
            ds = ds.union(other)
        elif name == "reduce":
            ds = ds.reduce_by_key(lambda a, b: a + b)
        elif name == "group":
            ds = ds.group_by_key()
            created.append(ds)
            ds = ds.map(lambda kv: (kv[0], sum(kv[1])))
        elif name == "join":
            other = ctx.parallelize(op[1], op[2])
            created.append(other)
            ds = ds.join(other)
            created.append(ds)
            ds = ds.map(lambda kv: (kv[0], kv[1][0] * 3 + kv[1][1]))
        created.append(ds)
    return ds, created


def interpret(items, ops) -> list:
    data = list(items)
    for op in ops:
        name = op[0]
        if name in ("map", "key_by", "map_values", "unkey"):
            f = _fn(op)
            data = [f(x) for x in data]
        elif name in ("filter", "filter_pair"):
            f = _fn(op)
            data = [x for x in data if f(x)]
        elif name == "flat_map":
            f = _fn(op)
            data = [y for x in data for y in f(x)]
        elif name == "union":
            data = data + list(op[1])
        elif name == "reduce":
            acc: dict = {}
            for k, v in data:
                acc[k] = acc[k] + v if k in acc else v
            data = list(acc.items())
        elif name == "group":
            groups: dict = {}
            for k, v in data:
                groups.setdefault(k, []).append(v)
            data = [(k, sum(vs)) for k, vs in groups.items()]
        elif name == "join":
            data = [(k, v * 3 + w) for k, v in data for k2, w in op[1] if k == k2]
    return data
