"""Pipeline configuration: thresholds, prompt set, CRF/affinity knobs.

The config serializes to a small human-editable key/value file. Grammar
(a TOML subset):

* ``key = value`` pairs, one per line; ``#`` starts a comment
* section headers ``[crf]`` and ``[prompt]`` scope keys to sub-configs
* values: ``true``/``false``, integers, floats, ``"quoted strings"``,
  and flat lists like ``["circle", "blur"]`` or ``[255, 0, 0]``

Defaults follow the engine's reference Pascal-VOC settings; ``preset``
exposes the alternative COCO and Pascal-Context threshold sets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources

from .postproc import CrfParams
from .prompter import PROMPT_TYPES, PromptSpec

BG_SETS = ("terrestrial", "aquatic_atmospheric", "manmade")


class ConfigError(Exception):
    """Raised for unparseable or invariant-violating configuration."""


def load_bg_set(name: str) -> tuple[str, ...]:
    """Background query list(s) by name: one of the three categories,
    ``all`` for their concatenation, or ``none``."""
    if name == "none":
        return ()
    if name == "all":
        return sum((load_bg_set(s) for s in BG_SETS), ())
    if name == "aquatic":
        name = "aquatic_atmospheric"
    if name not in BG_SETS:
        raise ConfigError(f"unknown background set {name!r}")
    text = resources.files("recurseg.data").joinpath(f"bg_{name}.txt").read_text()
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def _default_bg() -> tuple[str, ...]:
    return load_bg_set("all")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the segmentation pipeline in one value object."""

    eta: float = 0.4            # mask binarization threshold
    theta: float = 0.6          # query-filter threshold on diagonal scores
    lam: float = 0.4            # CAM threshold for box masks
    phi_iom: float = 0.7        # proposal-matching threshold (ensemble)
    phi_iou: float = 0.7        # replacement threshold (ensemble)
    prompt_types: tuple[str, ...] = ("circle", "blur")
    caa_iters: int = 2          # affinity refinement steps
    sinkhorn_iters: int = 50
    last_attn_layers: int = 8
    bg_queries: tuple[str, ...] = field(default_factory=_default_bg)
    mutual_background: bool = False
    #: queries treated as "stuff" when mutual_background is on
    stuff_queries: tuple[str, ...] = ()
    crf: CrfParams = field(default_factory=CrfParams)
    prompt_style: PromptSpec = field(default_factory=PromptSpec)

    def prompt_spec(self) -> PromptSpec:
        """Rendering spec with the configured prompt types applied."""
        return replace(self.prompt_style, types=tuple(self.prompt_types))


def validate_config(cfg: PipelineConfig) -> list[str]:
    """Collect every invariant violation; an empty list means the config
    is usable."""
    errors: list[str] = []
    for name in ("eta", "theta", "lam", "phi_iom", "phi_iou"):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            errors.append(f"{name} out of [0,1]: {v}")
    if not cfg.prompt_types:
        errors.append("prompt_types must be non-empty")
    unknown = set(cfg.prompt_types) - set(PROMPT_TYPES)
    if unknown:
        errors.append(f"unknown prompt types: {sorted(unknown)}")
    if cfg.caa_iters < 0:
        errors.append("caa_iters must be >= 0")
    if cfg.sinkhorn_iters < 1:
        errors.append("sinkhorn_iters must be >= 1")
    if cfg.last_attn_layers < 1:
        errors.append("last_attn_layers must be >= 1")
    errors.extend(cfg.crf.validate())
    errors.extend(cfg.prompt_spec().validate())
    return errors


def preset(name: str) -> PipelineConfig:
    """Named threshold presets: ``voc`` (default), ``coco``, ``context``."""
    if name == "voc":
        return PipelineConfig()
    if name == "coco":
        return PipelineConfig(eta=0.5, theta=0.3, lam=0.5)
    if name == "context":
        return PipelineConfig(eta=0.6, theta=0.2, lam=0.4, mutual_background=True)
    raise ConfigError(f"unknown preset {name!r}")


# --- serialization ---------------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value {v!r}")


def dumps_config(cfg: PipelineConfig) -> str:
    lines = ["# recurseg pipeline configuration"]
    lines.append(f"eta = {_fmt_value(cfg.eta)}")
    lines.append(f"theta = {_fmt_value(cfg.theta)}")
    lines.append(f"lambda = {_fmt_value(cfg.lam)}")
    lines.append(f"phi_iom = {_fmt_value(cfg.phi_iom)}")
    lines.append(f"phi_iou = {_fmt_value(cfg.phi_iou)}")
    lines.append(f"prompt_types = {_fmt_value(cfg.prompt_types)}")
    lines.append(f"caa_iters = {_fmt_value(cfg.caa_iters)}")
    lines.append(f"sinkhorn_iters = {_fmt_value(cfg.sinkhorn_iters)}")
    lines.append(f"last_attn_layers = {_fmt_value(cfg.last_attn_layers)}")
    lines.append(f"mutual_background = {_fmt_value(cfg.mutual_background)}")
    lines.append(f"bg_queries = {_fmt_value(cfg.bg_queries)}")
    if cfg.stuff_queries:
        lines.append(f"stuff_queries = {_fmt_value(cfg.stuff_queries)}")
    lines.append("")
    lines.append("[crf]")
    for f_ in fields(CrfParams):
        v = getattr(cfg.crf, f_.name)
        if v is None:
            continue
        lines.append(f"{f_.name} = {_fmt_value(v)}")
    lines.append("")
    lines.append("[prompt]")
    lines.append(f"color = {_fmt_value(cfg.prompt_style.color)}")
    lines.append(f"thickness = {_fmt_value(cfg.prompt_style.thickness)}")
    lines.append(f"blur_kernel = {_fmt_value(cfg.prompt_style.blur_kernel)}")
    if cfg.prompt_style.blur_sigma is not None:
        lines.append(f"blur_sigma = {_fmt_value(cfg.prompt_style.blur_sigma)}")
    return "\n".join(lines) + "\n"


def _parse_scalar(tok: str, lineno: int):
    tok = tok.strip()
    if tok in ("true", "false"):
        return tok == "true"
    if tok.startswith('"'):
        if not tok.endswith('"') or len(tok) < 2:
            raise ConfigError(f"line {lineno}: unterminated string")
        body = tok[1:-1]
        return body.replace('\\"', '"').replace("\\\\", "\\")
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {tok!r}") from None


def _split_list(body: str, lineno: int) -> list[str]:
    items, depth, cur, in_str = [], 0, "", False
    for ch in body:
        if ch == '"' and not cur.endswith("\\"):
            in_str = not in_str
        if ch == "," and not in_str:
            items.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        items.append(cur)
    if in_str:
        raise ConfigError(f"line {lineno}: unterminated string in list")
    return items


def parse_config_text(text: str) -> dict:
    """Parse the config grammar into ``{section: {key: value}}``; the
    top level uses section ''. Raises ConfigError with line numbers."""
    out: dict[str, dict] = {"": {}}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw
        # strip comments outside strings
        in_str = False
        for i, ch in enumerate(line):
            if ch == '"':
                in_str = not in_str
            elif ch == "#" and not in_str:
                line = line[:i]
                break
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header")
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if val.startswith("["):
            if not val.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated list")
            items = _split_list(val[1:-1], lineno)
            out[section][key] = [_parse_scalar(t, lineno) for t in items]
        else:
            out[section][key] = _parse_scalar(val, lineno)
    return out


_TOP_KEYS = {
    "eta": "eta", "theta": "theta", "lambda": "lam", "lam": "lam",
    "phi_iom": "phi_iom", "phi_iou": "phi_iou",
    "caa_iters": "caa_iters", "sinkhorn_iters": "sinkhorn_iters",
    "last_attn_layers": "last_attn_layers",
    "mutual_background": "mutual_background",
}


def config_from_dict(data: dict) -> PipelineConfig:
    top = dict(data.get("", {}))
    kwargs = {}
    for key in list(top):
        if key in _TOP_KEYS:
            kwargs[_TOP_KEYS[key]] = top.pop(key)
    if "prompt_types" in top:
        kwargs["prompt_types"] = tuple(top.pop("prompt_types"))
    if "bg_set" in top:
        kwargs["bg_queries"] = load_bg_set(top.pop("bg_set"))
    if "bg_queries" in top:
        kwargs["bg_queries"] = tuple(top.pop("bg_queries"))
    if "stuff_queries" in top:
        kwargs["stuff_queries"] = tuple(top.pop("stuff_queries"))
    if top:
        raise ConfigError(f"unknown config keys: {sorted(top)}")

    crf_data = dict(data.get("crf", {}))
    crf_fields = {f_.name for f_ in fields(CrfParams)}
    unknown = set(crf_data) - crf_fields
    if unknown:
        raise ConfigError(f"unknown [crf] keys: {sorted(unknown)}")
    if crf_data:
        kwargs["crf"] = CrfParams(**crf_data)

    pr = dict(data.get("prompt", {}))
    style_kwargs = {}
    if "color" in pr:
        color = pr.pop("color")
        if len(color) != 3:
            raise ConfigError("prompt color must have 3 components")
        style_kwargs["color"] = tuple(int(c) for c in color)
    for k in ("thickness", "blur_kernel", "blur_sigma"):
        if k in pr:
            style_kwargs[k] = pr.pop(k)
    if pr:
        raise ConfigError(f"unknown [prompt] keys: {sorted(pr)}")
    if style_kwargs:
        kwargs["prompt_style"] = PromptSpec(**style_kwargs)

    return PipelineConfig(**kwargs)


def loads_config(text: str) -> PipelineConfig:
    cfg = config_from_dict(parse_config_text(text))
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))


def fingerprint(cfg: PipelineConfig) -> str:
    """Short stable hash of the configuration, for report provenance."""
    return hashlib.sha256(dumps_config(cfg).encode()).hexdigest()[:12]
