#This module implements our own logging
import logging, os, sys

LOGGER_NAME = "tridomain"
ENV_LEVEL = "TRIDOMAIN_LOG"

factory = logging.getLogRecordFactory()


def print_formatting(*args, **kwargs):
  #Records of other libraries keep their %-style formatting
  if not str(args[0]).startswith(LOGGER_NAME):
    return factory(*args, **kwargs)
  newArgs = list(args)
  #So this changes the message attribute to be a string of the msg and all args joined together
  newArgs[4] = " ".join([str(i) for i in ([args[4]] + list(args[5] or ()))])
  newArgs[5] = tuple()  #Then don't try formatting again
  return factory(*newArgs, **kwargs)


logging.setLogRecordFactory(print_formatting)


def levelFromEnv(default=logging.INFO):
  """ Reads TRIDOMAIN_LOG. Accepts level names or integers """
  value = os.environ.get(ENV_LEVEL, "").strip()
  if not value:
    return default
  if value.isdigit():
    return int(value)
  level = logging.getLevelName(value.upper())
  if isinstance(level, int):
    return level
  return None


#All the loggers
log = logging.getLogger(LOGGER_NAME)
log.setLevel(logging.DEBUG)
log.propagate = False
#Standard debug stream
outHandler = logging.StreamHandler(sys.stdout)
outHandler.setFormatter(logging.Formatter("[%(levelname)s]: %(message)s"))
outHandler.addFilter(lambda record: record.levelno < logging.ERROR)
log.addHandler(outHandler)
#Errors go to stderr so a failing run is visible even with stdout redirected
errHandler = logging.StreamHandler(sys.stderr)
errHandler.setLevel(logging.ERROR)
errHandler.setFormatter(logging.Formatter("%(asctime)s [ERROR]: %(message)s"))
log.addHandler(errHandler)

fileHandler = None


def setLevel(level=None):
  """ Sets console verbosity. With no argument the environment decides """
  if level is None:
    level = levelFromEnv()
    if level is None:
      outHandler.setLevel(logging.INFO)
      log.warning("Unknown", ENV_LEVEL, "value", repr(os.environ.get(ENV_LEVEL)), "- using INFO")
      return logging.INFO
  outHandler.setLevel(level)
  return level


def attachFile(directory, name="last.log"):
  """ Starts a fresh log file in the output directory, replacing any previous one """
  global fileHandler
  detachFile()
  os.makedirs(directory, exist_ok=True)
  fileHandler = logging.FileHandler(os.path.join(directory, name), mode="w", delay=True)
  fileHandler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s]: %(message)s"))
  log.addHandler(fileHandler)
  return fileHandler


def detachFile():
  global fileHandler
  if fileHandler is not None:
    log.removeHandler(fileHandler)
    fileHandler.close()
    fileHandler = None


setLevel()
