# Tiered settings. Each concern registers its defaults on one of the module-level sections below,
# then a run layers the config file over them with createInstance()
# Settings.solver["dt"] or Settings.solver.dt both work

import sys

if sys.version_info >= (3, 11):
  import tomllib
else:
  import tomli as tomllib


class ConfigError(ValueError):
  pass


class SettingsDict(dict):
  """
  Each setting will be 2-layered, with a real value, and then a set of defaults backing it in 2 separate dicts
  Because you can create "instances" of settings which use the settings as defaults, you can create tiered settings,
    where changes to parents are propogated down the line to lower levels.
  """

  def __init__(self, *args, **kwargs):
    super().__init__(*args, **kwargs)
    self._defaults = {}

  def __getattr__(self, name):
    try:
      return self[name]
    except KeyError:
      raise AttributeError(name) from None

  def __setattr__(self, name, value):
    if name != "_defaults" and name in self:
      self[name] = value
    else:
      super().__setattr__(name, value)

  def __len__(self):
    """ Size of dict is sum of all elements in dict and defaults """
    return len(set(self) | set(self._defaults))

  def __missing__(self, key):
    """ If key wasn't in main dict, return the default """
    return self._defaults[key]

  def __iter__(self):
    #Sorted so anything serialized from settings comes out in a stable order
    return iter(sorted(set(super().__iter__()) | set(self._defaults)))

  def __repr__(self):
    return repr(self.copy())

  __str__ = __repr__

  def __contains__(self, key):
    """ Returns true if in defaults or overlay dict
      NOTE: setattr depends on this, and will set a value in the main dict if a default exists
    """
    return super().__contains__(key) or key in self._defaults

  def copy(self):
    """ Creates a dict-copy of this object """
    return {key: self[key] for key in self}

  def createInstance(self, setDefaults=True):
    """
    Has two modes:
      setDefaults = False: New object has a shallow copy of settings, and shared defaults
      setDefaults = True: New object has cleared settings, and the defaults are shared with the settings of the parent
    """
    if setDefaults:
      toRet = self.__class__()
      toRet._defaults = self
    else:
      toRet = self.__class__(self)
      toRet._defaults = self._defaults
    return toRet

  def updateDefaults(self, updateDict=None, **updates):
    """ Will update defaults from either an update dictionary or a set of keyword argument updates """
    if updateDict is None:
      updateDict = updates
    self._defaults.update(updateDict)

  def getOverrides(self):
    return dict(super().items())

  def isDefault(self, key):
    """ Returns true if the key is in the defaults and not in the top layer, false otherwise """
    return not super().__contains__(key) and key in self._defaults

  def applyOverrides(self, overrides, section):
    """
    Copies values from a config table into this layer.
    :param overrides: dict read from the config file
    :param section: name used in error messages
    :raises ConfigError: on any key without a registered default
    """
    if not isinstance(overrides, dict):
      raise ConfigError("Section [{}] must be a table, got {}".format(section, type(overrides).__name__))
    for key, value in overrides.items():
      if key not in self:
        raise ConfigError("Unknown key '{}' in section [{}]".format(key, section))
      default = self[key]
      if isinstance(default, SettingsDict):
        child = default.createInstance()
        child.applyOverrides(value, section + "." + key)
        value = child
      self[key] = value
    return self

  # NOTE: Keys should always be cleared rather than set to the default value, as the default is global and could be changed.
  def resetKey(self, key):
    del self[key]


def plain(value):
  """ Turns nested SettingsDicts into plain dicts """
  if isinstance(value, SettingsDict):
    return {key: plain(value[key]) for key in value}
  return value


def readToml(path):
  try:
    with open(path, "rb") as file:
      raw = file.read()
  except OSError as e:
    raise ConfigError("Cannot read config '{}': {}".format(path, e)) from None
  try:
    return raw, tomllib.loads(raw.decode("utf-8"))
  except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
    raise ConfigError("Config '{}' is not valid TOML: {}".format(path, e)) from None


# Here is globally-accessible objects. These can be updated between modules
geometry     = SettingsDict()
conductivity = SettingsDict()
ionic        = SettingsDict()
gap          = SettingsDict()
solver       = SettingsDict()
initial      = SettingsDict()
outputs      = SettingsDict()
units        = SettingsDict()
experiments  = SettingsDict()

sections = {
  "geometry": geometry,
  "conductivity": conductivity,
  "ionic": ionic,
  "gap": gap,
  "solver": solver,
  "initial": initial,
  "outputs": outputs,
  "units": units,
  "experiments": experiments,
}

outputs.updateDefaults({
  "directory": "output",
  "stride": 1,
  "formats": ["csv"],
})
