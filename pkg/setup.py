from setuptools import setup
from sys import argv


#If the argument is present, returns true and removes it from the arguments list
def getArg(arg):
  if arg in argv:
    argv.pop(argv.index(arg))
    return True
  return False

def log(*arg, **kwarg):
  return print("[BUILD]", *arg, **kwarg)

def debug(*arg, **kwarg):
  if DEBUG:
    return print("[DEBUG]", *arg, **kwarg)

DEBUG = getArg("--debug")

VERSION = None
try:
  with open("version.txt") as file:
    VERSION = file.read().strip()
except FileNotFoundError:
  pass
finally:
  VERSION = VERSION or "0.0.0"
  debug("Version: ", VERSION)

log("Building tridomain-sim", VERSION)
setup(**{
  "name": "tridomain-sim",
  "version": VERSION,
  "description": "Finite element tridomain interface simulator with a verification harness",
  "package_dir": {"": "src"},
  "py_modules": [
    "log", "Settings", "MeshHandler", "IonicHandler", "AssemblyHandler", "StepHandler",
    "DiagnosticsHandler", "ExperimentHandler", "FileHandler", "ConfigHandler", "main",
  ],
  "python_requires": ">=3.9",
  "install_requires": [
    "numpy>=1.22",
    "scipy>=1.12",
    "sympy>=1.10",
    "meshio>=5.0",
    "tomli>=1.1; python_version < '3.11'",
  ],
  "extras_require": {"test": ["pytest>=7"]},
  "entry_points": {"console_scripts": ["tridomain-sim = main:main"]},
})
