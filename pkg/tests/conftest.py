import json
from importlib import resources

import pytest

from dyncomp.loop_lang import parse_loop


@pytest.fixture(scope="session")
def corpus():
    """name -> (LoopProgram, expected table {input tuple: output tuple})."""
    root = resources.files("dyncomp") / "corpus"
    manifest = json.loads((root / "manifest.json").read_text())
    out = {}
    for entry in manifest["programs"]:
        prog = parse_loop((root / entry["file"]).read_text())
        expected = {
            tuple(int(v) for v in key.split(",")): tuple(vals)
            for key, vals in entry["expected"].items()
        }
        out[entry["name"]] = (prog, expected)
    return out


@pytest.fixture(scope="session")
def compiled_nf(corpus):
    from dyncomp.normal_form import compile_to_nf

    return {name: compile_to_nf(prog) for name, (prog, _) in corpus.items()}
