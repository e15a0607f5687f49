'use strict';
const binding = internalBinding('fs');

function readFile(path, callback) {
  binding.read(path);
  callback(null);
}

function writeFile(path, data, callback) {
  binding.writeString(path, data);
  callback(null);
}

function unlink(path, callback) {
  binding.unlink(path);
  callback(null);
}

function rmdir(path, callback) {
  binding.rmdir(path);
  callback(null);
}

function access(path, mode, callback) {
  binding.access(path, mode);
  callback(null);
}

exports.readFile = readFile;
exports.writeFile = writeFile;
exports.unlink = unlink;
exports.rmdir = rmdir;
exports.access = access;
