import json
import os
import time
from pathlib import Path

import pytest

VERDICTS: list[str] = []

# pre-trained desk encoders are cached here, keyed by the desk configuration
CACHE = Path(os.environ.get("RETINA_SSL_DESK_CACHE", Path(__file__).resolve().parent.parent / ".desk-cache"))


@pytest.fixture(scope="session")
def desk():
    """(config, encoder state, loss history, timing, labeled corpus) for the desk experiments."""
    from retina_ssl.desk import DeskConfig, desk_pretrain, labeled_corpus

    cfg = DeskConfig()
    timing = CACHE / f"desk-pretrain-{cfg.pretrain_key()}" / "elapsed.json"
    t = time.perf_counter()
    state, history = desk_pretrain(cfg, CACHE)
    if not timing.exists():
        timing.write_text(json.dumps({"seconds": time.perf_counter() - t, "cores": os.cpu_count()}))
    return cfg, state, history, json.loads(timing.read_text()), labeled_corpus(cfg)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
