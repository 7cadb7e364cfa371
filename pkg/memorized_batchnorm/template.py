from pathlib import Path

from .config import build_config, parse_flat, unflatten

TEMPLATE_PATH = Path(__file__).parent / "template.cfg"


def generate_config_template(overrides: dict[str, str] | None = None) -> str:
    if not TEMPLATE_PATH.exists():
        raise FileNotFoundError(f"Template file not found: {TEMPLATE_PATH}")

    text = TEMPLATE_PATH.read_text(encoding="utf-8")
    if not overrides:
        return text

    lines = text.splitlines()
    pending = dict(overrides)
    for i, line in enumerate(lines):
        key = line.partition("=")[0].strip().lstrip("# ").strip()
        if key in pending and "=" in line:
            lines[i] = f"{key} = {pending.pop(key)}"
    lines.extend(f"{key} = {value}" for key, value in pending.items())
    text = "\n".join(lines) + "\n"

    # reject overrides the models would not accept
    build_config(unflatten(parse_flat(text, "<template>")), "<template>")
    return text


def write_config_template(output_path: Path, overrides: dict[str, str] | None = None) -> None:
    with output_path.open("w", encoding="utf-8") as f:
        f.write(generate_config_template(overrides))
