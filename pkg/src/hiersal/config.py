"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Two key namespaces: ``model.*`` (architecture) and ``train.*`` (optimization).
Unknown keys are rejected. Every run writes its fully resolved configuration
next to its outputs.
"""

from .errors import ConfigError
from .model import ModelConfig


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_triples(s):
    out = []
    for part in s.split(","):
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise ConfigError(f"expected TxHxW triple, got {part!r}")
        out.append(tuple(int(d) for d in dims))
    return tuple(out)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join("x".join(str(d) for d in t) for t in v)
        return ",".join(str(d) for d in v)
    return str(v)


_MODEL_KEYS = {
    "clip_len": int,
    "height": int,
    "width": int,
    "in_channels": int,
    "stem_channels": int,
    "stem_spatial_stride": int,
    "stage_channels": _parse_int_tuple,
    "pool_strides": _parse_triples,
    "decoder_channels": int,
    "domain_count": int,
    "enable_da": _parse_bool,
    "enable_dsl": _parse_bool,
    "enabled_branches": _parse_int_tuple,
    "bn_eps": float,
    "bn_momentum": float,
    "da_channels": _parse_int_tuple,
    "da_hidden": int,
    "sigma_init": float,
    "sigma_floor": float,
}

_TRAIN_KEYS = {
    "total_iterations": int,
    "lr": float,
    "weight_decay": float,
    "micro_batch": int,
    "accumulation_steps": int,
    "seed": int,
    "log_every": int,
    "validate_every": int,
    "checkpoint_every": int,
    "target_update_classifier_only": _parse_bool,
}


def parse_kv_text(text, source="<config>"):
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def model_config_from_items(items, source="<config>"):
    kwargs = {}
    for key, value in items.items():
        if key not in _MODEL_KEYS:
            raise ConfigError(f"{source}: unknown model key {key!r}")
        try:
            kwargs[key] = _MODEL_KEYS[key](value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{source}: bad value for {key}: {e}")
    return ModelConfig(**kwargs)


def model_config_to_text(cfg):
    return "".join(f"{k} = {_fmt(getattr(cfg, k))}\n" for k in sorted(_MODEL_KEYS))


def model_config_from_text(text, source="<checkpoint>"):
    return model_config_from_items(parse_kv_text(text, source), source)


class RunConfig:
    """Parsed run file: a ModelConfig plus typed training arguments."""

    def __init__(self, model=None, train=None):
        self.model = model if model is not None else ModelConfig()
        self.train = dict(train) if train else {}

    @classmethod
    def from_text(cls, text, source="<config>"):
        items = parse_kv_text(text, source)
        model_items, train_items = {}, {}
        for key, value in items.items():
            if key.startswith("model."):
                model_items[key[len("model."):]] = value
            elif key.startswith("train."):
                name = key[len("train."):]
                if name not in _TRAIN_KEYS:
                    raise ConfigError(f"{source}: unknown train key {key!r}")
                try:
                    train_items[name] = _TRAIN_KEYS[name](value)
                except (ValueError, ConfigError) as e:
                    raise ConfigError(f"{source}: bad value for {key}: {e}")
            else:
                raise ConfigError(f"{source}: unknown key {key!r} "
                                  "(expected model.* or train.*)")
        return cls(model_config_from_items(model_items, source), train_items)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read(), source=str(path))

    def to_text(self):
        lines = [f"model.{k} = {_fmt(getattr(self.model, k))}" for k in sorted(_MODEL_KEYS)]
        lines += [f"train.{k} = {_fmt(v)}" for k, v in sorted(self.train.items())]
        return "\n".join(lines) + "\n"

    def write_resolved(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())
