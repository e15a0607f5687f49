var lockfile = require('./lib/lockfile');
lockfile.update('left-pad');
