from __future__ import annotations

import json
import logging

import numpy as np

from crossfvpy import logging as logging_mod
from crossfvpy import otel as otel_mod
from crossfvpy.config import ObservabilitySettings
from crossfvpy.logging import build_payload, log_json


class _FakeSpanContext:
    is_valid = True
    trace_id = 0xABC
    span_id = 0x12


class _FakeSpan:
    def get_span_context(self) -> _FakeSpanContext:
        return _FakeSpanContext()


def test_build_payload_fields(monkeypatch) -> None:
    monkeypatch.delenv("OTEL_SERVICE_NAME", raising=False)

    payload = build_payload("solver.simulate", "step accepted", level="debug", fields={"step": 3})

    assert payload["application_name"] == "crossfv"
    assert payload["method_name"] == "solver.simulate"
    assert payload["detail"] == "step accepted"
    assert payload["level"] == "debug"
    assert payload["step"] == 3
    assert "trace_id" not in payload


def test_build_payload_carries_trace_ids(monkeypatch) -> None:
    monkeypatch.setattr(logging_mod.trace, "get_current_span", lambda: _FakeSpan())

    payload = build_payload("cli.run", "run finished", application_name="lab")

    assert payload["application_name"] == "lab"
    assert payload["trace_id"] == f"{0xABC:032x}"
    assert payload["span_id"] == f"{0x12:016x}"


def test_log_json_encodes_numpy_values(caplog) -> None:
    logger = logging.getLogger("crossfv.test.encode")

    with caplog.at_level(logging.INFO, logger="crossfv.test.encode"):
        log_json(logger, "solver.simulate", "masses", fields={"masses": np.array([0.4, 0.2]), "t": np.float64(0.5)})

    record = json.loads(caplog.records[-1].getMessage())
    assert record["masses"] == [0.4, 0.2]
    assert record["t"] == 0.5


def test_log_json_keeps_non_ascii_text(caplog) -> None:
    logger = logging.getLogger("crossfv.test.ascii")

    with caplog.at_level(logging.WARNING, logger="crossfv.test.ascii"):
        log_json(logger, "checks.run_check_suite", "A_σ consistency", level="warning")

    assert "A_σ" in caplog.records[-1].getMessage()
    assert caplog.records[-1].levelno == logging.WARNING


def test_log_json_skips_disabled_levels(monkeypatch, caplog) -> None:
    logger = logging.getLogger("crossfv.test.skip")
    calls = []
    monkeypatch.setattr(logging_mod, "build_payload", lambda *args, **kwargs: calls.append(args) or {})

    with caplog.at_level(logging.INFO, logger="crossfv.test.skip"):
        log_json(logger, "solver.simulate", "step accepted", level="debug")

    assert calls == []
    assert caplog.records == []


def test_init_otel_stays_off_without_tracing(monkeypatch) -> None:
    monkeypatch.setattr(otel_mod, "_OTEL_INITIALIZED", False)

    assert otel_mod.init_otel("crossfv", None, ObservabilitySettings(tracing_enabled=False)) is False
    assert otel_mod._OTEL_INITIALIZED is False


def test_parse_otlp_endpoint() -> None:
    assert otel_mod._parse_otlp_endpoint("") == ("localhost:4317", True)
    assert otel_mod._parse_otlp_endpoint("http://collector:4317") == ("collector:4317", True)
    assert otel_mod._parse_otlp_endpoint("https://collector:4317") == ("collector:4317", False)
    assert otel_mod._parse_otlp_endpoint("collector:4317") == ("collector:4317", True)


def test_configure_logging_returns_named_logger(monkeypatch) -> None:
    monkeypatch.setattr(otel_mod.logging, "basicConfig", lambda **_kwargs: None)

    logger = otel_mod.configure_logging("crossfv.test", level="DEBUG", include_correlation=False)

    assert logger.name == "crossfv.test"
