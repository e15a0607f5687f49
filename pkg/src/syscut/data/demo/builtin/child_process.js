'use strict';
const processWrap = internalBinding('process_wrap');

function normalizeSpawnArguments(file, args) {
  return { file: file, args: args };
}

function spawn(file, args, options) {
  const opts = normalizeSpawnArguments(file, args);
  return processWrap.spawn(opts);
}

function exec(command, callback) {
  const child = spawn('/bin/sh', ['-c', command]);
  if (callback) callback(null, child);
  return child;
}

function execSync(command) {
  return spawn('/bin/sh', ['-c', command]);
}

module.exports = {
  exec: exec,
  execSync: execSync,
  spawn: spawn,
};
