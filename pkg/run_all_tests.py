"""
Test Runner - FedFMC simulator
Checks migrations, tables, presets and the results API, then runs every app's tests
"""
import os
import sys

import django
from django.core.management import call_command

# Setup Django
sys.path.append(os.path.dirname(os.path.abspath(__file__)))
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'fedfmc.settings')
django.setup()

TEST_MODULES = [
    'learner.tests',
    'data_plane.tests',
    'cost_ledger.tests',
    'federation.tests',
    'harness.tests',
    'harness.tests_api',
]


def print_header(text):
    print("\n" + "=" * 70)
    print(f"  {text}")
    print("=" * 70 + "\n")


def print_section(text):
    print("\n" + "-" * 70)
    print(f"  {text}")
    print("-" * 70)


def safe_print(text):
    """Print text, replacing emoji on consoles that cannot encode them"""
    try:
        print(text)
    except UnicodeEncodeError:
        for emoji, ascii_text in (('✅', '[OK]'), ('❌', '[FAIL]'), ('⚠️', '[WARN]'), ('🎉', '[SUCCESS]')):
            text = text.replace(emoji, ascii_text)
        print(text)


def check_migrations():
    print_header("CHECKING MIGRATIONS")
    try:
        call_command('makemigrations', '--check', '--dry-run', verbosity=0)
        safe_print("✅ All migrations are up to date")
        return True
    except SystemExit:
        safe_print("⚠️ Pending migrations detected")
        print("   Run: python manage.py makemigrations harness")
        return False


def check_database_tables():
    print_header("CHECKING DATABASE TABLES")
    from django.db import connection

    required_tables = ['harness_experimentrun', 'harness_roundmetric']
    existing_tables = set(connection.introspection.table_names())
    missing = [table for table in required_tables if table not in existing_tables]
    for table in required_tables:
        safe_print(f"{'❌' if table in missing else '✅'} {table}")
    if missing:
        safe_print(f"\n⚠️ {len(missing)} table(s) missing")
        print("   Run: python manage.py migrate")
        return False
    return True


def check_presets():
    print_header("CHECKING PRESETS")
    from harness.config_utils import ConfigError, list_presets, preset_path, parse_config

    ok = True
    for name, description in list_presets():
        try:
            cfg = parse_config(preset_path(name))
            safe_print(f"✅ {name}: {cfg.algorithm}, N={cfg.num_devices}, T={cfg.T}, K={cfg.K}  ({description})")
        except ConfigError as e:
            safe_print(f"❌ {name}: {e}")
            ok = False
    return ok


def check_api_endpoints():
    print_header("CHECKING API ENDPOINTS")
    from django.test import Client

    client = Client()
    results = {}
    for url, name in [('/api/runs/', 'Runs'), ('/api/presets/', 'Presets')]:
        try:
            response = client.get(url)
            results[name] = f"{'[OK]' if response.status_code == 200 else '[WARN]'} {response.status_code}"
        except Exception as e:
            results[name] = f"[FAIL] Error: {e}"
        print(f"{results[name]} - {name}")
    return all(result.startswith('[OK]') for result in results.values())


def run_django_tests():
    print_header("RUNNING DJANGO TEST SUITE")
    results = {}
    for module in TEST_MODULES:
        print_section(f"Testing: {module}")
        try:
            failures = call_command('test', module, verbosity=2)
            results[module] = not failures
        except SystemExit as e:
            results[module] = e.code == 0
        except Exception as e:
            safe_print(f"❌ {module}: {e}")
            results[module] = False
    return results


def generate_summary(results):
    print_header("TEST SUMMARY")
    passed = sum(1 for ok in results.values() if ok)
    failed = len(results) - passed
    for name, ok in results.items():
        safe_print(f"{'✅' if ok else '❌'} {name}")
    print(f"\nTotal Checks: {len(results)}  Passed: {passed}  Failed: {failed}")
    if failed == 0:
        safe_print("\n🎉 All checks passed!")
    else:
        safe_print("\n⚠️ Some checks failed. Please review the output above.")
    return failed == 0


if __name__ == '__main__':
    print_header("FEDFMC SIMULATOR - TEST SUITE")

    all_results = {
        'Migrations': check_migrations(),
        'Database Tables': check_database_tables(),
        'Presets': check_presets(),
        'API Endpoints': check_api_endpoints(),
    }
    if '--skip-tests' not in sys.argv:
        all_results.update(run_django_tests())
    else:
        print("\nTo run tests manually:")
        for module in TEST_MODULES:
            print(f"  python manage.py test {module} -v 2")

    sys.exit(0 if generate_summary(all_results) else 1)
