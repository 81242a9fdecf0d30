# Regenerate toy.ini and surrogate.ini from the built-in defaults
from pathlib import Path

from cobras.schemas import default_config

if __name__ == "__main__":
    root = Path(__file__).resolve().parent.parent
    for name in ("toy", "surrogate"):
        path = root / f"{name}.ini"
        path.write_text(default_config(name).to_ini(), encoding="utf-8")
        print(f"wrote {path}")
