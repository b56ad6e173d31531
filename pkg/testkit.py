# testkit.py
"""Общий запуск тестовых скриптов: python test_<area>.py печатает ✅/❌ по каждой функции."""

import sys
import traceback


def run_tests(namespace: dict, prefix: str = "test_"):
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith(prefix) and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e}")
            traceback.print_exc()
    print(f"\n{len(tests) - failed}/{len(tests)} passed")
    sys.exit(1 if failed else 0)


def expect_error(code: str, fn, *args, **kwargs):
    """Вызывает fn и проверяет, что она бросает PerfusionError с данным кодом."""
    from services.errors import PerfusionError

    try:
        fn(*args, **kwargs)
    except PerfusionError as e:
        assert e.code == code, f"expected {code}, got {e.code}"
        return e
    raise AssertionError(f"expected PerfusionError({code})")
