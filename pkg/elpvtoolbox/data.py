# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Parameter and configuration containers that do not depend on torch

import json
import copy

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """ Raised for invalid configuration keys or values. The message
    always names the offending key. """
    pass


class CheckpointError(IOError):
    """ Raised when a model checkpoint is unreadable or corrupt """
    pass


class CheckpointVersionError(CheckpointError):
    """ Raised when a checkpoint was written with another format version """
    pass


class ParamSet(object):
    """ Stores run or model parameters that can be accessed
    using both key (x['key']) and dot notation (x.key) for
    convenience. Supports JSON im-/export. """

    def __init__(self, input_dict=None):
        if input_dict is not None:
            if not isinstance(input_dict, (dict, ParamSet)):
                raise ValueError('input_dict must be a dict or ParamSet!')

            if isinstance(input_dict, ParamSet):
                self.__dict__ = input_dict.toDict()
            else:
                self.__dict__ = copy.deepcopy(input_dict)


    def __getitem__(self, key):
        return self.__dict__[key]


    def __setitem__(self, key, value):
        self.__dict__[key] = value


    def __repr__(self):
        return repr(self.__dict__)


    def __str__(self):
        """ Pretty-print parameters for readability """
        if len(self.__dict__) > 0:
            spacing = min(max([len(key) for key in self.__dict__]), 20)
            s = ''
            fmt = '{{:{:d}s}}: {{:s}}\n'.format(spacing)
            for key in sorted(self.__dict__.keys()):
                s += fmt.format(str(key), str(self.__dict__[key]))
            return s
        else:
            return('Empty parameter set.')


    def __len__(self):
        return len(self.__dict__)


    def __iter__(self):
        """ Iteration returns parameters as (key, value) tuples """
        return iter(zip(self.__dict__.keys(), self.__dict__.values()))


    def __contains__(self, key):
        return key in self.__dict__


    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.toDict() == other.toDict()


    def keys(self):
        return list(self.__dict__.keys())


    def get(self, key, default=None):
        return self.__dict__.get(key, default)


    def toDict(self):
        """ Return a copy of all attributes as a dict """
        return copy.deepcopy(self.__dict__)


    def toJSON(self):
        """ Return JSON representation of this ParamSet """
        return json.dumps(self.__dict__, sort_keys=True)


    def toJSONFile(self, json_file):
        """ Save this ParamSet to a JSON file

        Args:
            json_file (str): Output file name
        """
        with open(json_file, 'w') as jf:
            jf.write(json.dumps(self.__dict__, indent=2, sort_keys=True))


    @classmethod
    def fromJSONFile(cls, json_file):
        """ Create a new parameter set from a JSON file """
        with open(json_file, 'r') as jf:
            return cls(json.load(jf))



class ConfigSet(ParamSet):
    """ ParamSet with declared defaults and validation.

    Subclasses set DEFAULTS (key -> default value) and may override
    validate(). Keys not listed in DEFAULTS are rejected, so typos in
    run-config files fail loudly instead of being ignored.
    """
    DEFAULTS = {}
    SECTION = None

    def __init__(self, input_dict=None, **kwargs):
        ParamSet.__init__(self, copy.deepcopy(self.DEFAULTS))
        if input_dict is not None:
            if not isinstance(input_dict, (dict, ParamSet)):
                raise ValueError('input_dict must be a dict or ParamSet!')
            self.update(dict(input_dict))
        if len(kwargs) > 0:
            self.update(kwargs)
        self.validate()


    def update(self, values):
        """ Overwrite parameters from a dict, rejecting unknown keys

        Args:
            values (dict): keys and new values
        """
        for key, value in values.items():
            if key not in self.DEFAULTS:
                raise ConfigError('Unknown configuration key: {:s}'.format(self._keyName(key)))
            if isinstance(value, ParamSet):
                value = value.toDict()
            self.__dict__[key] = copy.deepcopy(value)


    def replace(self, **kwargs):
        """ Return a validated copy with some values changed """
        d = self.toDict()
        d.update(kwargs)
        return type(self)(d)


    def validate(self):
        """ Check parameter values, raise ConfigError on failure """
        pass


    def _keyName(self, key):
        if self.SECTION is not None:
            return '{:s}.{:s}'.format(self.SECTION, str(key))
        return str(key)


    def _require(self, condition, key, message):
        """ Raise a ConfigError naming key if condition does not hold """
        if not condition:
            raise ConfigError('Invalid value for {:s}: {:s} (got {:s})'.format(
                self._keyName(key), message, repr(self.__dict__.get(key))))



class RunConfig(object):
    """ The single run-config file: one section per ConfigSet class.

    Sections are registered by the modules defining them (see
    registerSection), missing sections take their defaults.
    """
    _sections = {}

    def __init__(self, input_dict=None):
        input_dict = copy.deepcopy(input_dict) if input_dict is not None else {}
        if not isinstance(input_dict, dict):
            raise ConfigError('Run configuration must be a JSON object')

        version = input_dict.pop('config_version', CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError('Unsupported config_version: {:s} (expected {:d})'.format(str(version), CONFIG_VERSION))

        for name in input_dict.keys():
            if name not in self._sections:
                raise ConfigError('Unknown configuration section: {:s}'.format(str(name)))

        self.sections = {}
        for name, cls in self._sections.items():
            section = input_dict.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError('Configuration section {:s} must be a JSON object'.format(name))
            self.sections[name] = cls(section)


    @classmethod
    def registerSection(cls, config_class):
        """ Register a ConfigSet subclass under its SECTION name.
        Usable as a class decorator. """
        cls._sections[config_class.SECTION] = config_class
        return config_class


    def __getitem__(self, name):
        return self.sections[name]


    def __getattr__(self, name):
        if name != 'sections' and 'sections' in self.__dict__ and name in self.sections:
            return self.sections[name]
        raise AttributeError(name)


    def __repr__(self):
        return '<RunConfig, sections: {:s}>'.format(', '.join(sorted(self.sections.keys())))


    def override(self, assignment):
        """ Apply a 'section.key=value' override. The value is parsed as
        JSON and taken verbatim as a string if that fails.

        Args:
            assignment (str): override string, e.g. 'pipeline.expansion_ratio=0.1'
        """
        if '=' not in assignment:
            raise ConfigError('Override must look like section.key=value: {:s}'.format(assignment))
        path, raw = assignment.split('=', 1)
        if '.' not in path:
            raise ConfigError('Override must name a section and key: {:s}'.format(path))
        name, key = path.split('.', 1)
        if name not in self.sections:
            raise ConfigError('Unknown configuration section: {:s}'.format(name))
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        section = self.sections[name].toDict()
        if key not in section:
            raise ConfigError('Unknown configuration key: {:s}'.format(path))
        section[key] = value
        self.sections[name] = type(self.sections[name])(section)


    def toDict(self):
        d = {'config_version': CONFIG_VERSION}
        for name, section in self.sections.items():
            d[name] = section.toDict()
        return d


    def toJSONFile(self, json_file):
        """ Save the full configuration (defaults included) to a JSON file """
        with open(json_file, 'w') as jf:
            jf.write(json.dumps(self.toDict(), indent=2, sort_keys=True))


    @classmethod
    def fromJSONFile(cls, json_file):
        """ Load a run configuration from a JSON file """
        with open(json_file, 'r') as jf:
            try:
                data = json.load(jf)
            except ValueError as e:
                raise ConfigError('Run-config file {:s} is not valid JSON: {:s}'.format(str(json_file), str(e)))
        return cls(data)
