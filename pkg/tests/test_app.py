import asyncio
import json
import math

from tacrep.app import RunMonitorApp, severity_of
from tacrep.ui_components import HelpScreen
from tacrep.ui_widgets import bar_levels, blend, grade_color, resample

HEADER = "step,loss,lr,grad_norm,psnr\n"


def _rows(steps, loss=1.0):
    return "".join(f"{s},{loss / (s + 1):.6f},1e-3,0.5,{'' if s % 2 else 12.5}\n" for s in steps)


def test_severity_flags_spikes_and_nan():
    assert severity_of({"loss": 1.0}, None) is None
    assert severity_of({"loss": 3.0}, 1.0) == "warn"
    assert severity_of({"loss": float("nan")}, 1.0) == "critical"
    assert severity_of({"loss": None}, 1.0) == "critical"


def test_chart_helpers():
    assert resample([1.0, 2.0, float("nan"), 3.0], 10) == [1.0, 2.0, 3.0]
    assert resample([1.0, 3.0, 5.0, 7.0], 2) == [2.0, 6.0]
    levels, fractions = bar_levels([1.0, 2.0, 3.0], height=2)
    assert fractions == [0.0, 0.5, 1.0]
    assert levels == [1, 8, 16]
    _, log_fractions = bar_levels([1.0, 10.0, 100.0], height=1, log_scale=True)
    assert math.isclose(log_fractions[1], 0.5)
    assert blend("#000000", "#ffffff", 0.5) == "#808080"
    assert grade_color(0.0) == "#22c55e"
    assert grade_color(1.0) == "#f87171"


def test_dashboard_follows_metrics(tmp_path):
    metrics = tmp_path / "metrics.csv"
    metrics.write_text(HEADER + _rows(range(3)))
    (tmp_path / "ledger.json").write_text(json.dumps({"status": "running"}))

    async def scenario():
        app = RunMonitorApp(run_dir=tmp_path, interval=60.0)
        async with app.run_test() as pilot:
            await pilot.pause()
            assert len(app.rows) == 3
            assert app.table.row_count == 3
            assert app.status.step == 2
            assert app.status.psnr == 12.5
            assert app.status.run_status == "running"

            await pilot.press("p")
            assert app.paused
            with open(metrics, "a") as fh:
                fh.write(_rows(range(3, 5)))
            app._tick()
            assert len(app.rows) == 3

            await pilot.press("p")
            app._tick()
            assert len(app.rows) == 5
            assert app.chart.values[-1] == 0.2

            # una reanudación recorta el fichero: se relee desde el principio
            metrics.write_text(HEADER + _rows(range(2)))
            app._tick()
            assert len(app.rows) == 2

            await pilot.press("l")
            assert app.chart.log_scale

            await pilot.press("h")
            await pilot.pause()
            assert isinstance(app.screen, HelpScreen)
            await pilot.press("x")
            await pilot.pause()
            assert not isinstance(app.screen, HelpScreen)

    asyncio.run(scenario())


def test_dashboard_waits_for_missing_metrics(tmp_path):
    async def scenario():
        app = RunMonitorApp(run_dir=tmp_path, interval=60.0)
        async with app.run_test() as pilot:
            await pilot.pause()
            assert len(app.rows) == 0
            assert app.status.run_status == "—"
            assert app.status.step is None

    asyncio.run(scenario())
